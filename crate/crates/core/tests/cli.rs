use std::fs;
use std::path::Path;

use densefocus::cli::main_with_args;
use serde_json::{json, Value};

fn run(out: &Path, args: &[&str]) -> i32 {
    let mut full = vec![
        "densefocus".to_string(),
        "--out".to_string(),
        out.display().to_string(),
    ];
    full.extend(args.iter().map(|s| s.to_string()));
    main_with_args(full)
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.display().to_string()
}

fn small_task() -> Value {
    json!({ "imbalance_ratio": 50.0, "num_positives": 8, "seed": 3 })
}

fn train_config() -> Value {
    json!({
        "schema": "densefocus.train/1",
        "task": small_task(),
        "training": {
            "loss": { "kind": "fl", "gamma": 2.0, "alpha": 0.25 },
            "iterations": 60,
            "architecture": { "type": "one_hidden", "hidden": 4 }
        }
    })
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn losses_with_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["losses"]), 0);
    let csv = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x_t,kind,gamma,alpha,beta,loss,dloss_dx"
    );
    assert_eq!(csv.lines().count(), 1 + 5 * 1001);
    assert!(!csv.contains('\r'));
    let manifest: Value = serde_json::from_slice(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["schema"], "densefocus.manifest/1");
    assert_eq!(manifest["command"], "losses");
}

#[test]
fn losses_with_custom_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema": "densefocus.losses/1", "x_min": -1.0, "x_max": 1.0, "step": 0.5,
        "losses": [{ "kind": "fl_star", "gamma": 2.0, "beta": 1.0 }]
    });
    let p = write(dir.path(), "grid.json", &cfg);
    assert_eq!(run(&dir.path().join("o"), &["losses", "--config", &p]), 0);
    let csv = fs::read_to_string(dir.path().join("o/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("-1.0,fl_star,2.0,,1.0,"));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "train.json", &train_config());
    let out = dir.path().join("run");
    assert_eq!(run(&out, &["train", "--config", &p]), 0);
    let names = ["model.json", "history.csv", "report.json"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| read(&out.join(n))).collect();
    let history = String::from_utf8(first[1].clone()).unwrap();
    assert_eq!(history.lines().count(), 61);
    let report: Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(report["iterations_run"], 60);
    assert!(report["divergence"].is_null());
    assert!(report["metrics"]["average_precision"].as_f64().unwrap() > 0.0);

    assert_eq!(run(&out, &["train", "--config", &p]), 0);
    for (n, bytes) in names.iter().zip(&first) {
        assert_eq!(&read(&out.join(n)), bytes, "{n} changed between runs");
    }

    assert_eq!(run(&out, &["--seed", "99", "train", "--config", &p]), 0);
    assert_ne!(read(&out.join("model.json")), first[0]);
}

#[test]
fn train_reports_divergence_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_config();
    cfg["training"]["learning_rate"] = json!(1e6);
    cfg["training"]["loss"] = json!({ "kind": "ce" });
    cfg["training"]["pi"] = json!(0.5);
    let p = write(dir.path(), "train.json", &cfg);
    assert_eq!(run(dir.path(), &["train", "--config", &p]), 2);
    let report: Value = serde_json::from_slice(&read(&dir.path().join("report.json"))).unwrap();
    assert!(report["divergence"]["iteration"].is_u64());
    assert!(report["metrics"].is_null());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut typo = train_config();
    typo["training"]["learning_rat"] = json!(0.1);
    let p = write(dir.path(), "typo.json", &typo);
    assert_eq!(run(dir.path(), &["train", "--config", &p]), 1);

    let mut wrong_schema = train_config();
    wrong_schema["schema"] = json!("densefocus.sweep/1");
    let p = write(dir.path(), "schema.json", &wrong_schema);
    assert_eq!(run(dir.path(), &["train", "--config", &p]), 1);

    let mut missing = train_config();
    missing.as_object_mut().unwrap().remove("schema");
    let p = write(dir.path(), "missing.json", &missing);
    assert_eq!(run(dir.path(), &["train", "--config", &p]), 1);

    assert_eq!(
        run(dir.path(), &["train", "--config", "/nonexistent/cfg.json"]),
        1
    );
    assert_eq!(run(dir.path(), &["bogus"]), 1);
    assert_eq!(run(dir.path(), &["anchors", "--width", "16"]), 1);
}

fn sweep_config() -> Value {
    json!({
        "schema": "densefocus.sweep/1",
        "task": small_task(),
        "training": { "iterations": 30 },
        "settings": [{ "name": "fl", "loss": { "kind": "fl", "gamma": 2.0, "alpha": 0.25 } }],
        "grids": [
            { "type": "alpha_ce", "alphas": [0.25, 0.75] },
            { "type": "ohem", "loss": { "kind": "ce" }, "batch_sizes": [32], "nms_thresholds": [0.7, null], "ratio": [true] }
        ],
        "trials": 2,
        "seed": 5
    })
}

#[test]
fn sweep_is_independent_of_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "sweep.json", &sweep_config());
    let names = ["report.json", "sweep_trials.csv", "sweep_summary.csv"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&a, &["--jobs", "1", "sweep", "--config", &p]), 0);
    assert_eq!(run(&b, &["--jobs", "3", "sweep", "--config", &p]), 0);
    for n in names {
        assert_eq!(read(&a.join(n)), read(&b.join(n)), "{n}");
    }
    let summary = fs::read_to_string(a.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5);
    let trials = fs::read_to_string(a.join("sweep_trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 5 * 2);
}

#[test]
fn cdf_from_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "train.json", &train_config());
    assert_eq!(run(dir.path(), &["train", "--config", &p]), 0);
    let cfg = json!({ "schema": "densefocus.cdf/1", "task": small_task(), "gammas": [0.0, 2.0], "max_negatives": 200 });
    let c = write(dir.path(), "cdf.json", &cfg);
    let model = dir.path().join("model.json").display().to_string();
    let out = dir.path().join("cdf");
    assert_eq!(run(&out, &["cdf", "--model", &model, "--config", &c]), 0);
    let summary = fs::read_to_string(out.join("cdf_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "polarity,gamma,samples,top10_share");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("positive,0.0,8,"));
    assert!(rows[3].starts_with("negative,0.0,200,"));
    let curve = fs::read_to_string(out.join("cdf_negative_gamma2.0.csv")).unwrap();
    let last = curve.lines().last().unwrap();
    assert!(last.starts_with("1.0,"));
    assert!(last.ends_with(",1.0"));
}

#[test]
fn anchors_dump() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(
            dir.path(),
            &["anchors", "--width", "256", "--height", "128"]
        ),
        0
    );
    let csv = fs::read_to_string(dir.path().join("anchors.csv")).unwrap();
    let cells: usize = [8usize, 16, 32, 64, 128]
        .iter()
        .map(|s| (256 / s) * (128 / s))
        .sum();
    assert_eq!(csv.lines().count(), 1 + 9 * cells);

    let cfg = json!({
        "schema": "densefocus.anchors/1",
        "anchors": { "levels": [3], "aspect_ratios": [1.0], "octave_scales": [1.0] },
        "image_width": 16, "image_height": 8
    });
    let p = write(dir.path(), "a.json", &cfg);
    let out = dir.path().join("small");
    assert_eq!(run(&out, &["anchors", "--config", &p]), 0);
    assert_eq!(
        fs::read_to_string(out.join("anchors.csv")).unwrap(),
        "level,cx,cy,w,h\n3,4.0,4.0,32.0,32.0\n3,12.0,4.0,32.0,32.0\n"
    );
}

#[test]
fn binary_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_densefocus"))
        .args([
            "--out",
            &dir.path().display().to_string(),
            "anchors",
            "--width",
            "128",
            "--height",
            "128",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("anchors.csv").exists());
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_densefocus"))
        .arg("train")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    use densefocus::cli::{AnchorsRunConfig, CdfConfig, LossGridConfig, TrainRunConfig};
    use densefocus::experiments::sweep::SweepConfig;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = |n: &str| fs::read_to_string(dir.join(n)).unwrap();
    for n in ["train_focal.json", "train_ohem.json"] {
        serde_json::from_str::<TrainRunConfig>(&text(n)).unwrap();
    }
    serde_json::from_str::<LossGridConfig>(&text("losses.json")).unwrap();
    serde_json::from_str::<CdfConfig>(&text("cdf.json")).unwrap();
    serde_json::from_str::<AnchorsRunConfig>(&text("anchors.json")).unwrap();
    let sweep: SweepConfig = serde_json::from_str(&text("sweep.json")).unwrap();
    sweep.validate().unwrap();
}
