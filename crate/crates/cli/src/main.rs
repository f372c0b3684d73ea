//! `leakid`: synthetic scenarios, training, detection, repeated runs, sweeps
//! and reports from one pipeline config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leakid::ErrorClass;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "leakid", version, about = "Pressure-based leak identification pipelines")]
struct Cli {
    /// Leave the creation time out of provenance headers.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Worker threads for repeated runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario: panel, truth and spec echo.
    Synth(SynthArgs),
    /// Fit the regression and, for PINN, train the demand network.
    Train(RunArgs),
    /// Run change-point detection with a trained model.
    Detect(DetectArgs),
    /// Slack/threshold sensitivity grid with Pareto flags.
    Sweep(SweepArgs),
    /// Repeat training and detection over many seeds.
    Uq(UqArgs),
    /// BASE, PINN and FK side by side on one seed.
    Report(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scenario spec (TOML).
    #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
    spec: Option<PathBuf>,
    /// Built-in scenario: dma-c-abrupt, dma-c-incipient or dma-c-leak-free.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pipeline config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set net.max_epochs=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// BASE, PINN or FK.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// CUSUM slack δ.
    #[arg(long)]
    slack: Option<f64>,
    /// CUSUM threshold ε.
    #[arg(long)]
    threshold: Option<f64>,
}

impl RunArgs {
    /// Every override as `key=value`, flags after `--set` entries.
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        if let Some(v) = &self.variant {
            out.push(format!("variant=\"{}\"", v.to_uppercase()));
        }
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(d) = self.slack {
            out.push(format!("detection.slack={d:?}"));
        }
        if let Some(e) = self.threshold {
            out.push(format!("detection.threshold={e:?}"));
        }
        out
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct UqArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of runs (seeds first_seed..first_seed + runs).
    #[arg(long)]
    runs: Option<usize>,
    /// Also write the monitored series for a later `sweep --inputs`.
    #[arg(long)]
    save_traces: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Traces saved by `uq --save-traces`; otherwise the runs are repeated.
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
