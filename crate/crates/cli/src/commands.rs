use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use leakid::eval::{
    demand_recovery, evaluate_mre, pareto_cells, run_variant, sensitivity_sweep, uq_summary, variant_mre, RunData,
    SweepInput, Variant, VariantRun,
};
use leakid::ingest::format_timestamp;
use leakid::pipeline::{ModelArtifact, PipelineConfig};
use leakid::report::{heatmap, line_plot, write_csv, write_json, LineSeries, Provenance};
use leakid::synth::{generate, write_scenario, ReferenceKind, ScenarioSpec};
use leakid::{Error, Result};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::{config, Cli, Command, DetectArgs, RunArgs, SweepArgs, SynthArgs, UqArgs};

const MAX_PLOT_POINTS: usize = 2000;

struct Ctx {
    no_timestamp: bool,
    jobs: usize,
}

impl Ctx {
    fn provenance(&self, command: &str, cfg: &str, seeds: Vec<u64>, overrides: &[String]) -> Provenance {
        Provenance {
            tool: "leakid".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            created: (!self.no_timestamp).then(|| Utc::now().to_rfc3339()),
            seeds,
            overrides: overrides.to_vec(),
            config: cfg.to_string(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let ctx = Ctx {
        no_timestamp: cli.no_timestamp,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Uq(a) => uq(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

/// `--out`, then the config's output_dir, then `$LEAKID_OUTPUT_ROOT/<command>`,
/// then `leakid-out/<command>`.
fn output_dir(flag: Option<&Path>, cfg: Option<&PipelineConfig>, command: &str) -> Result<PathBuf> {
    let dir = match (flag, cfg.and_then(|c| c.output_dir.as_deref())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.to_path_buf(),
        (None, None) => match std::env::var_os("LEAKID_OUTPUT_ROOT") {
            Some(root) => PathBuf::from(root).join(command),
            None => PathBuf::from("leakid-out").join(command),
        },
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct Loaded {
    cfg: PipelineConfig,
    overrides: Vec<String>,
    cfg_text: String,
}

fn load(args: &RunArgs, extra: &[String]) -> Result<Loaded> {
    let mut overrides = args.overrides();
    overrides.extend_from_slice(extra);
    let cfg = config::load(&args.config, &overrides)?;
    let cfg_text = cfg.to_toml()?;
    Ok(Loaded {
        cfg,
        overrides,
        cfg_text,
    })
}

fn write_svg(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

fn thin<T: Copy>(v: &[T]) -> Vec<T> {
    let step = v.len().div_ceil(MAX_PLOT_POINTS).max(1);
    v.iter().step_by(step).copied().collect()
}

fn hours_since(t: DateTime<Utc>, origin: DateTime<Utc>) -> f64 {
    (t - origin).num_seconds() as f64 / 3600.0
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

// ---------------------------------------------------------------------------

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match (&a.spec, &a.reference) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            ScenarioSpec::from_toml_str(&text)?
        }
        (None, Some(r)) => {
            let kind: ReferenceKind = serde_json::from_value(json!(r))
                .map_err(|_| Error::Config(format!("unknown reference scenario '{r}'")))?;
            leakid::synth::reference_scenario(kind, 0)
        }
        (None, None) => return Err(Error::Config("give --spec or --reference".into())),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = output_dir(a.out.as_deref(), None, "synth")?;
    let truth = generate(&spec)?;
    write_scenario(&truth, &spec, &out)?;
    std::fs::write(
        out.join("pipeline.toml"),
        "[data]\nkind = \"scenario\"\nspec = \"scenario.toml\"\n",
    )?;
    info!("wrote scenario (seed {}) to {}", truth.seed, out.display());
    println!("{}", out.display());
    Ok(())
}

fn train(ctx: &Ctx, a: RunArgs) -> Result<()> {
    let l = load(&a, &[])?;
    let cfg = &l.cfg;
    let data = cfg.load_data()?.run;
    let out = output_dir(a.out.as_deref(), Some(cfg), "train")?;
    let prov = ctx.provenance("train", &l.cfg_text, vec![cfg.seed], &l.overrides);
    info!("training {} on {} samples", cfg.variant, data.train_end);
    let (_, coeffs, model) = variant_mre(cfg.variant, &data, &cfg.net, cfg.seed)?;
    let artifact = match (cfg.variant, model) {
        (Variant::Base, _) => ModelArtifact::Base { coefficients: coeffs },
        (Variant::Fk, _) => ModelArtifact::Fk { coefficients: coeffs },
        (Variant::Pinn, Some(m)) => ModelArtifact::Pinn { model: Box::new(m) },
        (Variant::Pinn, None) => unreachable!("PINN always trains a network"),
    };
    write_json(&out.join("model.json"), &prov, &artifact)?;
    if let ModelArtifact::Pinn { model } = &artifact {
        let mut rows = Vec::new();
        for (k, f) in model.fold_reports.iter().enumerate() {
            for (e, (tl, vl)) in f.train_loss.iter().zip(&f.validation_loss).enumerate() {
                rows.push(vec![
                    f.fold.to_string(),
                    f.mirrored.to_string(),
                    e.to_string(),
                    tl.to_string(),
                    vl.to_string(),
                    (k == model.selected_fold).to_string(),
                ]);
            }
        }
        write_csv(
            &out.join("folds.csv"),
            &prov,
            &["fold", "mirrored", "epoch", "train_loss", "validation_loss", "selected"],
            &rows,
        )?;
        let sel = &model.fold_reports[model.selected_fold];
        let curve = |v: &[f64]| v.iter().enumerate().map(|(e, x)| (e as f64, x.log10())).collect();
        let svg = line_plot(
            &prov,
            &format!("loss curves, fold {}{}", sel.fold, if sel.mirrored { " (mirrored)" } else { "" }),
            "epoch",
            "log10 loss",
            &[
                LineSeries {
                    name: "train",
                    points: curve(&sel.train_loss),
                },
                LineSeries {
                    name: "validation",
                    points: curve(&sel.validation_loss),
                },
            ],
            None,
            None,
        );
        write_svg(&out.join("loss.svg"), svg)?;
        info!(
            "selected fold {}; loss {:.4e} -> {:.4e}",
            model.selected_fold, model.baseline_loss, model.final_loss
        );
    }
    println!("{}", out.join("model.json").display());
    Ok(())
}

fn read_model(path: &Path) -> Result<ModelArtifact> {
    let text = std::fs::read_to_string(path)?;
    ModelArtifact::from_json(&text)
}

/// Alarm log, statistic traces, detection summary and plots for one run.
fn write_detection(out: &Path, prov: &Provenance, data: &RunData, run: &VariantRun, prefix: &str) -> Result<()> {
    let alarm_rows: Vec<Vec<String>> = run
        .detection
        .alarms
        .iter()
        .map(|a| {
            vec![
                format_timestamp(a.timestamp),
                a.series_id.clone(),
                a.statistic.to_string(),
                a.slack.to_string(),
                a.threshold.to_string(),
                a.first.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join(format!("{prefix}alarms.csv")),
        prov,
        &["timestamp", "series_id", "statistic", "delta", "epsilon", "first"],
        &alarm_rows,
    )?;
    let traces = &run.detection.traces;
    let mut header = vec!["timestamp".to_string()];
    header.extend(traces.iter().map(|(l, _)| l.clone()));
    let axis = &run.sweep_input.axis;
    let rows: Vec<Vec<String>> = (0..axis.len())
        .map(|t| {
            let mut r = vec![format_timestamp(axis.timestamp(t))];
            r.extend(traces.iter().map(|(_, tr)| tr.statistic(t).to_string()));
            r
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join(format!("{prefix}traces.csv")), prov, &header_ref, &rows)?;

    let origin = data.panel.axis().start();
    let leak_h = data.leak_start.map(|s| hours_since(s, origin));
    let idx: Vec<usize> = thin(&(0..axis.len()).collect::<Vec<_>>());
    let stat_series: Vec<LineSeries> = traces
        .iter()
        .map(|(l, tr)| LineSeries {
            name: l,
            points: idx
                .iter()
                .map(|&t| (hours_since(axis.timestamp(t), origin), tr.statistic(t)))
                .collect(),
        })
        .collect();
    let threshold = run.detection.alarms.first().map(|a| a.threshold);
    write_svg(
        &out.join(format!("{prefix}cusum.svg")),
        line_plot(
            prov,
            &format!("{} CUSUM statistic", run.outcome.variant),
            "hours since panel start",
            "max(S+, S-)",
            &stat_series,
            threshold,
            leak_h,
        ),
    )?;
    let full = &run.mre.axis;
    let idx: Vec<usize> = thin(&(0..full.len()).collect::<Vec<_>>());
    let labels: Vec<String> = (0..run.mre.n_pairs())
        .map(|k| run.mre.pair_label(k, data.panel.sensor_ids()))
        .collect();
    let mre_series: Vec<LineSeries> = run
        .mre
        .reduced
        .iter()
        .zip(&labels)
        .map(|(s, l)| LineSeries {
            name: l,
            points: idx.iter().map(|&t| (hours_since(full.timestamp(t), origin), s[t])).collect(),
        })
        .collect();
    write_svg(
        &out.join(format!("{prefix}mre.svg")),
        line_plot(
            prov,
            &format!("{} reconstruction error", run.outcome.variant),
            "hours since panel start",
            "MRE (m)",
            &mre_series,
            None,
            leak_h,
        ),
    )?;
    Ok(())
}

fn detection_summary(data: &RunData, run: &VariantRun, cfg: &PipelineConfig) -> serde_json::Value {
    json!({
        "outcome": run.outcome,
        "n_alarms": run.detection.alarms.len(),
        "first_alarm": run.detection.first_alarm(),
        "ttd_hours": run.outcome.ttd.map(|t| t.hours()),
        "leak_start": data.leak_start,
        "effective": {
            "slack": cfg.detection.slack,
            "threshold": cfg.detection.threshold,
            "mode": cfg.detection.mode,
            "min_std": cfg.detection.min_std,
            "standardization": "training-window mean and population std per monitored series, floored at min_std",
        },
        "monitor": run.monitor,
    })
}

fn detect(ctx: &Ctx, a: DetectArgs) -> Result<()> {
    let l = load(&a.run, &[])?;
    let cfg = &l.cfg;
    let data = cfg.load_data()?.run;
    let artifact = read_model(&a.model)?;
    let variant = artifact.variant();
    let mre = artifact.reconstruction_error(&data)?;
    let seed = match &artifact {
        ModelArtifact::Pinn { model } => model.seed,
        _ => cfg.seed,
    };
    let run = evaluate_mre(
        variant,
        &data,
        &cfg.detection,
        seed,
        mre,
        artifact.coefficients().clone(),
        None,
    )?;
    let out = output_dir(a.run.out.as_deref(), Some(cfg), "detect")?;
    let prov = ctx.provenance("detect", &l.cfg_text, vec![seed], &l.overrides);
    write_detection(&out, &prov, &data, &run, "")?;
    write_json(&out.join("detection.json"), &prov, &detection_summary(&data, &run, cfg))?;
    match (run.outcome.ttd, run.outcome.first_alarm) {
        (Some(t), _) => println!("{}: {:?}, TTD {:.2} h", variant, run.outcome.classification, t.hours()),
        (None, Some(f)) => println!("{}: {:?}, first alarm {}", variant, run.outcome.classification, f),
        (None, None) => println!("{}: {:?}, no alarm", variant, run.outcome.classification),
    }
    Ok(())
}

/// Runs over `seeds` on up to `jobs` threads, in seed order.
fn repeated_runs(ctx: &Ctx, cfg: &PipelineConfig, data: &RunData, seeds: &[u64]) -> Result<Vec<VariantRun>> {
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() || seeds.is_empty() {
        return Err(Error::Config("repeated runs need at least one seed, all distinct".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rc = cfg.run_config();
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let r = run_variant(cfg.variant, data, &rc, s);
                if let Ok(r) = &r {
                    info!("seed {s}: {:?}", r.outcome.classification);
                }
                r
            })
            .collect()
    })
}

fn runs_override(runs: Option<usize>) -> Vec<String> {
    runs.map(|n| vec![format!("uq.n_runs={n}")]).unwrap_or_default()
}

fn load_with_runs(args: &RunArgs, runs: Option<usize>) -> Result<Loaded> {
    let mut l = load(args, &runs_override(runs))?;
    if runs.is_some() {
        // an explicit run count replaces any explicit seed list
        l.cfg.uq.seeds = None;
        l.cfg_text = l.cfg.to_toml()?;
    }
    Ok(l)
}

fn uq(ctx: &Ctx, a: UqArgs) -> Result<()> {
    let l = load_with_runs(&a.run, a.runs)?;
    let cfg = &l.cfg;
    let data = cfg.load_data()?.run;
    let seeds = cfg.uq.seeds();
    let runs = repeated_runs(ctx, cfg, &data, &seeds)?;
    let out = output_dir(a.run.out.as_deref(), Some(cfg), "uq")?;
    let prov = ctx.provenance("uq", &l.cfg_text, seeds.clone(), &l.overrides);
    let outcomes: Vec<_> = runs.iter().map(|r| r.outcome.clone()).collect();
    let summary = uq_summary(&data.leak_id, cfg.variant, outcomes);
    let median = leakid::eval::median_ttd_hours(&summary.outcomes);
    write_json(
        &out.join("uq.json"),
        &prov,
        &json!({ "summary": summary, "median_ttd_hours_inf_for_misses": median.is_finite().then_some(median) }),
    )?;
    let rows: Vec<Vec<String>> = summary
        .outcomes
        .iter()
        .map(|o| {
            vec![
                o.seed.to_string(),
                format!("{:?}", o.classification),
                opt(o.ttd.map(|t| t.hours())),
                o.first_alarm.map(format_timestamp).unwrap_or_default(),
                o.alarm_series.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &out.join("outcomes.csv"),
        &prov,
        &["seed", "classification", "ttd_hours", "first_alarm", "alarm_series"],
        &rows,
    )?;
    let m = &summary.metrics;
    let c = &summary.counts;
    write_csv(
        &out.join("metrics.csv"),
        &prov,
        &["leak_id", "variant", "tp", "fp", "fn", "precision", "recall", "f1"],
        &[vec![
            summary.leak_id.clone(),
            summary.variant.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            opt(m.precision),
            opt(m.recall),
            opt(m.f1),
        ]],
    )?;
    let mut ttd: Vec<f64> = summary.outcomes.iter().filter_map(|o| o.ttd.map(|t| t.hours())).collect();
    ttd.sort_by(f64::total_cmp);
    write_svg(
        &out.join("ttd.svg"),
        line_plot(
            &prov,
            &format!("{} TTD over true positives ({} of {})", cfg.variant, ttd.len(), seeds.len()),
            "rank",
            "TTD (h)",
            &[LineSeries {
                name: "TTD",
                points: ttd.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect(),
            }],
            None,
            None,
        ),
    )?;
    if a.save_traces {
        let inputs: Vec<&SweepInput> = runs.iter().map(|r| &r.sweep_input).collect();
        write_json(&out.join("sweep_inputs.json"), &prov, &json!({ "inputs": inputs }))?;
    }
    println!(
        "{} runs: TP {} FP {} FN {}; F1 {}",
        seeds.len(),
        c.tp,
        c.fp,
        c.fn_,
        m.f1.map_or("undefined".into(), |f| format!("{f:.3}"))
    );
    Ok(())
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let l = load_with_runs(&a.run, a.runs)?;
    let cfg = &l.cfg;
    let (inputs, seeds) = match &a.inputs {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut doc: serde_json::Value = serde_json::from_str(&text)?;
            let inputs: Vec<SweepInput> = serde_json::from_value(doc["inputs"].take())?;
            let seeds: Vec<u64> = serde_json::from_value(doc["provenance"]["seeds"].take()).unwrap_or_default();
            (inputs, seeds)
        }
        None => {
            let data = cfg.load_data()?.run;
            let seeds = cfg.uq.seeds();
            let runs = repeated_runs(ctx, cfg, &data, &seeds)?;
            (runs.into_iter().map(|r| r.sweep_input).collect(), seeds)
        }
    };
    let deltas = cfg.sweep.deltas();
    let eps = cfg.sweep.epsilons();
    let cells = sensitivity_sweep(&inputs, &deltas, &eps)?;
    let flags = pareto_cells(&cells);
    let out = output_dir(a.run.out.as_deref(), Some(cfg), "sweep")?;
    let prov = ctx.provenance("sweep", &l.cfg_text, seeds, &l.overrides);
    let row = |c: &leakid::eval::SweepCell, p: bool| {
        vec![
            c.delta.to_string(),
            c.epsilon.to_string(),
            opt(c.avg_ttd_hours),
            opt(c.f1),
            c.counts.tp.to_string(),
            c.counts.fp.to_string(),
            c.counts.fn_.to_string(),
            if p { "*".into() } else { String::new() },
        ]
    };
    let header = ["delta", "epsilon", "avg_ttd_hours", "f1", "tp", "fp", "fn", "pareto"];
    let rows: Vec<_> = cells.iter().zip(&flags).map(|(c, p)| row(c, *p)).collect();
    write_csv(&out.join("sweep.csv"), &prov, &header, &rows)?;
    let mut front: Vec<_> = cells.iter().zip(&flags).filter(|(_, p)| **p).map(|(c, _)| c).collect();
    front.sort_by(|a, b| b.avg_ttd_hours.unwrap().total_cmp(&a.avg_ttd_hours.unwrap()));
    let rows: Vec<_> = front.iter().map(|c| row(c, true)).collect();
    write_csv(&out.join("pareto.csv"), &prov, &header, &rows)?;
    // heatmaps: rows along δ, columns along ε
    let ttd: Vec<Option<f64>> = cells.iter().map(|c| c.avg_ttd_hours).collect();
    let f1: Vec<Option<f64>> = cells.iter().map(|c| c.f1).collect();
    write_svg(
        &out.join("ttd_heatmap.svg"),
        heatmap(&prov, "average TTD (h)", "threshold ε", "slack δ", &eps, &deltas, &ttd),
    )?;
    write_svg(
        &out.join("f1_heatmap.svg"),
        heatmap(&prov, "F1", "threshold ε", "slack δ", &eps, &deltas, &f1),
    )?;
    write_json(
        &out.join("sweep.json"),
        &prov,
        &json!({ "cells": cells, "pareto": flags, "n_models": inputs.len() }),
    )?;
    println!("{} cells over {} models, {} Pareto-optimal", cells.len(), inputs.len(), front.len());
    Ok(())
}

fn report(ctx: &Ctx, a: RunArgs) -> Result<()> {
    let l = load(&a, &[])?;
    let cfg = &l.cfg;
    let data = cfg.load_data()?.run;
    let out = output_dir(a.out.as_deref(), Some(cfg), "report")?;
    let prov = ctx.provenance("report", &l.cfg_text, vec![cfg.seed], &l.overrides);
    let rc = cfg.run_config();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for v in Variant::ALL {
        if v == Variant::Fk && data.latent_truth.is_none() {
            info!("no latent truth; skipping FK");
            continue;
        }
        info!("running {v}");
        let run = run_variant(v, &data, &rc, cfg.seed)?;
        write_detection(&out, &prov, &data, &run, &format!("{}_", v.to_string().to_lowercase()))?;
        rows.push(vec![
            v.to_string(),
            format!("{:?}", run.outcome.classification),
            opt(run.outcome.ttd.map(|t| t.hours())),
            opt(run.outcome.ttd.map(|t| t.days())),
            run.outcome.first_alarm.map(format_timestamp).unwrap_or_default(),
        ]);
        runs.push(run);
    }
    write_csv(
        &out.join("ttd.csv"),
        &prov,
        &["variant", "classification", "ttd_hours", "ttd_days", "first_alarm"],
        &rows,
    )?;
    let mut recovery = serde_json::Value::Null;
    if let (Some(truth), Some(model)) = (
        &data.latent_truth,
        runs.iter().find_map(|r| r.model.as_ref()),
    ) {
        let train = data.panel.slice_indices(0, data.train_end)?;
        let est = model.estimate_demands(&train, &data.known.slice(0, data.train_end))?;
        let truth = truth.slice(0, data.train_end);
        let r2 = demand_recovery(&est, &truth);
        recovery = json!(r2);
        let origin = data.panel.axis().start();
        let n = data.train_end.min(3 * 86400 / data.panel.axis().step_seconds() as usize);
        let norm = |v: &[f64]| {
            let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
            v[..n]
                .iter()
                .enumerate()
                .map(|(t, x)| (hours_since(data.panel.axis().timestamp(t), origin), x / m))
                .collect::<Vec<_>>()
        };
        let mut series = Vec::new();
        for (id, v) in truth.ids.iter().zip(&truth.values) {
            series.push((format!("{id} (truth)"), norm(v)));
        }
        for (id, v) in est.ids.iter().zip(&est.values) {
            series.push((format!("{id} (estimate)"), norm(v)));
        }
        let ls: Vec<LineSeries> = series
            .iter()
            .map(|(n, p)| LineSeries {
                name: n,
                points: p.clone(),
            })
            .collect();
        write_svg(
            &out.join("demand.svg"),
            line_plot(&prov, "normalized latent demand", "hours since panel start", "Q / max|Q|", &ls, None, None),
        )?;
    }
    let summaries: Vec<_> = runs.iter().map(|r| detection_summary(&data, r, cfg)).collect();
    write_json(
        &out.join("report.json"),
        &prov,
        &json!({ "runs": summaries, "demand_recovery_r2": recovery }),
    )?;
    for r in &rows {
        println!("{:<5} {:<14} {}", r[0], r[1], if r[2].is_empty() { "-" } else { &r[2] });
    }
    Ok(())
}
