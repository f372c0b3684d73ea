use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leakid::synth::{reference_scenario, ReferenceKind};

fn leakid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakid"))
        .args(args)
        .env_remove("LEAKID_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV written with a `#` provenance header.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

/// Pipeline config over a four-week scenario written next to it.
fn scenario_config(dir: &Path, kind: ReferenceKind, extra: &str) -> PathBuf {
    let mut spec = reference_scenario(kind, 3);
    spec.length = 4 * 7 * 288;
    spec.training_hours = 7.0 * 24.0;
    if let Some(l) = spec.leak.as_mut() {
        l.start = spec.start + chrono::Duration::days(12);
        l.ramp_hours = l.ramp_hours.min(5.0 * 24.0);
    }
    std::fs::write(dir.join("spec.toml"), spec.to_toml().unwrap()).unwrap();
    let cfg = dir.join("pipeline.toml");
    std::fs::write(
        &cfg,
        format!(
            "variant = \"BASE\"\n{extra}\n[data]\nkind = \"scenario\"\nspec = \"spec.toml\"\n\n\
             [net]\nmax_epochs = 3\npatience = 2\nrefit_rounds = 0\nhidden_width = 8\n"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_is_deterministic_and_validates() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    for out in [&a, &b] {
        ok(&leakid(&["synth", "--reference", "dma-c-abrupt", "--seed", "4", "--out", s(out)]));
    }
    for f in ["panel.csv", "truth.csv", "scenario.toml", "pipeline.toml"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let mut spec = reference_scenario(ReferenceKind::DmaCAbrupt, 0);
    spec.k1[1] = 0.0;
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, spec.to_toml().unwrap()).unwrap();
    let out = leakid(&["synth", "--spec", s(&bad), "--out", s(&d.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation"));
}

#[test]
fn synth_output_feeds_a_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().join("scn");
    ok(&leakid(&["synth", "--reference", "dma-c-leak-free", "--out", s(&dir)]));
    let out = d.path().join("train");
    ok(&leakid(&[
        "train",
        "-c",
        s(&dir.join("pipeline.toml")),
        "--variant",
        "base",
        "--out",
        s(&out),
    ]));
    assert!(out.join("model.json").exists());
}

#[test]
fn train_writes_models_and_fold_reports() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "");

    let base = d.path().join("base");
    ok(&leakid(&["train", "-c", s(&cfg), "--out", s(&base)]));
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(base.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["variant"], "BASE");
    assert!(model.get("coefficients").is_some());
    assert!(!base.join("folds.csv").exists());

    let p1 = d.path().join("p1");
    let p2 = d.path().join("p2");
    for out in [&p1, &p2] {
        ok(&leakid(&["--no-timestamp", "train", "-c", s(&cfg), "--variant", "PINN", "--seed", "9", "--out", s(out)]));
    }
    let m1 = std::fs::read(p1.join("model.json")).unwrap();
    assert_eq!(m1, std::fs::read(p2.join("model.json")).unwrap());
    let rows = csv_rows(&p1.join("folds.csv"));
    let mut folds: Vec<&str> = rows.iter().filter(|r| r[1] == "false").map(|r| r[0].as_str()).collect();
    folds.dedup();
    assert_eq!(folds, ["0", "1", "2", "3", "4"]);
    assert!(rows.iter().any(|r| r[1] == "true"));
    assert!(rows.iter().any(|r| r[5] == "true"));
    let model: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    assert_eq!(model["variant"], "PINN");
    assert_eq!(model["model"]["fold_reports"].as_array().unwrap().len(), 6);
    assert!(p1.join("loss.svg").exists());
}

#[test]
fn detect_reports_alarms_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "");
    let model_dir = d.path().join("model");
    ok(&leakid(&["train", "-c", s(&cfg), "--variant", "FK", "--out", s(&model_dir)]));
    let model = model_dir.join("model.json");

    let out = d.path().join("det");
    let stdout = ok(&leakid(&[
        "detect",
        "-c",
        s(&cfg),
        "--model",
        s(&model),
        "--slack",
        "0.75",
        "--threshold",
        "30",
        "--out",
        s(&out),
    ]));
    assert!(stdout.contains("TruePositive"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("detection.json")).unwrap()).unwrap();
    assert_eq!(report["outcome"]["classification"], "true_positive");
    assert!(report["ttd_hours"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["effective"]["slack"], 0.75);
    assert_eq!(report["effective"]["threshold"], 30.0);
    let overrides = report["provenance"]["overrides"].as_array().unwrap();
    assert!(overrides.iter().any(|o| o == "detection.slack=0.75"));
    assert!(overrides.iter().any(|o| o == "detection.threshold=30.0"));
    let alarms = std::fs::read_to_string(out.join("alarms.csv")).unwrap();
    assert!(alarms.lines().any(|l| l.starts_with("# overrides: ") && l.contains("detection.slack=0.75")));
    assert!(!csv_rows(&out.join("alarms.csv")).is_empty());
    for f in ["traces.csv", "cusum.svg", "mre.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn detect_with_defaults_finds_the_abrupt_leak() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "");
    let m = d.path().join("m");
    ok(&leakid(&["train", "-c", s(&cfg), "--variant", "FK", "--out", s(&m)]));
    let out = d.path().join("det");
    ok(&leakid(&["detect", "-c", s(&cfg), "--model", s(&m.join("model.json")), "--out", s(&out)]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("detection.json")).unwrap()).unwrap();
    assert_eq!(report["outcome"]["classification"], "true_positive");
    assert!(report["ttd_hours"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["effective"]["slack"], 1.0);
    assert_eq!(report["effective"]["threshold"], 300.0);
}

#[test]
fn detect_on_a_leak_free_panel_is_silent() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCLeakFree, "");
    let m = d.path().join("m");
    ok(&leakid(&["train", "-c", s(&cfg), "--variant", "FK", "--out", s(&m)]));
    let out = d.path().join("det");
    ok(&leakid(&["detect", "-c", s(&cfg), "--model", s(&m.join("model.json")), "--out", s(&out)]));
    assert!(csv_rows(&out.join("alarms.csv")).is_empty());
}

#[test]
fn detect_rejects_a_model_for_other_sensors() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "");
    let m = d.path().join("m");
    ok(&leakid(&["train", "-c", s(&cfg), "--out", s(&m)]));
    let path = m.join("model.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"n_b\"", "\"n_x\"");
    std::fs::write(&path, text).unwrap();
    let out = leakid(&["detect", "-c", s(&cfg), "--model", s(&path), "--out", s(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
}

#[test]
fn sweep_grids_and_pareto_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "[uq]\nn_runs = 2\n");
    let one = d.path().join("one");
    ok(&leakid(&[
        "sweep",
        "-c",
        s(&cfg),
        "--set",
        "variant=\"FK\"",
        "--set",
        "sweep.delta_steps=0",
        "--set",
        "sweep.epsilon_steps=0",
        "--out",
        s(&one),
    ]));
    let rows = csv_rows(&one.join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][7], "*");
    assert_eq!(csv_rows(&one.join("pareto.csv")).len(), 1);

    let full = d.path().join("full");
    ok(&leakid(&["sweep", "-c", s(&cfg), "--variant", "FK", "--out", s(&full)]));
    assert_eq!(csv_rows(&full.join("sweep.csv")).len(), 81);
    assert!(full.join("ttd_heatmap.svg").exists() && full.join("f1_heatmap.svg").exists());

    // empty grid
    let out = leakid(&["sweep", "-c", s(&cfg), "--variant", "FK", "--set", "sweep.epsilon_min=-1", "--set", "sweep.epsilon_steps=0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn uq_is_independent_of_job_count_and_feeds_sweep() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "[uq]\nn_runs = 3\n");
    let a = d.path().join("a");
    let b = d.path().join("b");
    ok(&leakid(&["--no-timestamp", "--jobs", "1", "uq", "-c", s(&cfg), "--variant", "PINN", "--save-traces", "--out", s(&a)]));
    ok(&leakid(&["--no-timestamp", "--jobs", "3", "uq", "-c", s(&cfg), "--variant", "PINN", "--save-traces", "--out", s(&b)]));
    for f in ["uq.json", "outcomes.csv", "metrics.csv", "sweep_inputs.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = csv_rows(&a.join("outcomes.csv"));
    assert_eq!(rows.len(), 3);
    let m = &csv_rows(&a.join("metrics.csv"))[0];
    let total: usize = m[2..5].iter().map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(total, 3);

    let sw = d.path().join("sw");
    ok(&leakid(&[
        "sweep",
        "-c",
        s(&cfg),
        "--inputs",
        s(&a.join("sweep_inputs.json")),
        "--out",
        s(&sw),
    ]));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sw.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(doc["n_models"], 3);
}

#[test]
fn report_compares_variants() {
    let d = tempfile::tempdir().unwrap();
    let cfg = scenario_config(d.path(), ReferenceKind::DmaCAbrupt, "");
    let out = d.path().join("r");
    ok(&leakid(&["report", "-c", s(&cfg), "--out", s(&out)]));
    let rows = csv_rows(&out.join("ttd.csv"));
    let variants: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(variants, ["BASE", "PINN", "FK"]);
    assert!(out.join("demand.svg").exists());
    assert!(out.join("pinn_cusum.svg").exists());
}

#[test]
fn output_root_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_leakid"))
        .args(["synth", "--reference", "dma-c-leak-free"])
        .env("LEAKID_OUTPUT_ROOT", d.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(d.path().join("synth").join("panel.csv").exists());
}

#[test]
fn exit_codes_follow_error_classes() {
    let d = tempfile::tempdir().unwrap();
    // usage
    assert_eq!(leakid(&["train"]).status.code(), Some(1));
    assert_eq!(leakid(&["--help"]).status.code(), Some(0));
    // config
    let missing = d.path().join("none.toml");
    assert_eq!(leakid(&["train", "-c", s(&missing)]).status.code(), Some(1));

    // data: malformed panel
    let panel = d.path().join("panel.csv");
    std::fs::write(&panel, "timestamp,a,b\n2019-01-01T00:00:00Z,1.0,oops\n").unwrap();
    let cfg = d.path().join("csv.toml");
    std::fs::write(
        &cfg,
        "variant = \"BASE\"\n\n[training]\nstart = \"2019-01-01T00:00:00Z\"\nend = \"2019-01-01T01:00:00Z\"\n\n\
         [data]\nkind = \"csv\"\npanel = \"panel.csv\"\n\n[data.schema]\ntimestamp_column = \"timestamp\"\n\
         columns = [{ name = \"a\", role = \"pressure\" }, { name = \"b\", role = \"pressure\" }]\n",
    )
    .unwrap();
    assert_eq!(leakid(&["train", "-c", s(&cfg)]).status.code(), Some(2));

    // numeric: a flat sensor leaves the fit singular
    let mut body = String::from("timestamp,a,b\n");
    for t in 0..24 {
        body.push_str(&format!("2019-01-01T{:02}:{:02}:00Z,{},50.0\n", t / 12, (t % 12) * 5, 40.0 + (t as f64).sin()));
    }
    std::fs::write(&panel, body).unwrap();
    let out = leakid(&["train", "-c", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
