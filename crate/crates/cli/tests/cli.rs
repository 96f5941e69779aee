use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn run(dir: &Path, config: &Value, args: &[&str]) -> Output {
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string(config).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_augoverlap"))
        .args(args)
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small(r: f64) -> Value {
    json!({
        "seed": 1,
        "dataset": { "train_per_class": 60, "test_per_class": 20 },
        "train": { "r": r, "epochs": 3, "batch_size": 32, "M": 16, "hidden_width": 8, "output_dim": 4 },
        "graph": { "r": r }
    })
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &json!({ "train": { "lr": 0.1 } }), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_value_exits_with_code_2() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &json!({ "train": { "r": -1.0, "epochs": 1 } }), &["train"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_graph_at_zero_radius_has_one_component_per_sample() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &small(0.0), &["simulate-graph"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = read_json(&dir.path().join("out/stats.json"));
    assert_eq!(stats["num_edges"], 0);
    assert_eq!(stats["num_components"], 120);
    let resolved = read_json(&dir.path().join("out/resolved_config.json"));
    assert_eq!(resolved["seed"], 1);
    assert_eq!(resolved["train"]["seed"], 1);
}

#[test]
fn simulate_graph_writes_consistent_tables() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &small(0.3), &["simulate-graph"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = read_json(&dir.path().join("out/stats.json"));
    let edges = fs::read_to_string(dir.path().join("out/edges.csv")).unwrap();
    assert_eq!(edges.lines().count() - 1, stats["num_edges"].as_u64().unwrap() as usize);
    assert_eq!(stats["inter_edges"], 0);
    let samples = fs::read_to_string(dir.path().join("out/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 121);
}

#[test]
fn training_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let out = run(dir.path(), &small(0.1), &["train"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["trace.csv", "checkpoint.json", "features_test.csv"] {
        let x = fs::read(a.path().join("out").join(file)).unwrap();
        let y = fs::read(b.path().join("out").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    let report = read_json(&a.path().join("out/report.json"));
    assert!(report["probe_test_acc"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &small(0.1), &["simulate-graph", "--seed", "9"]);
    assert!(out.status.success());
    let resolved = read_json(&dir.path().join("out/resolved_config.json"));
    assert_eq!(resolved["seed"], 9);
}

#[test]
fn scaling_and_counterexample_run() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "graph": { "scaling": { "N_list": [20, 40], "trials": 2 } },
        "metrics": { "counterexample": { "N": 400, "K": 2, "m": 4 } }
    });
    assert!(run(dir.path(), &cfg, &["scaling"]).status.success());
    let csv = fs::read_to_string(dir.path().join("out/scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(run(dir.path(), &cfg, &["counterexample"]).status.success());
    let ce = read_json(&dir.path().join("out/counterexample.json"));
    assert!(ce["probe_acc"].as_f64().unwrap() <= 0.75);
}

#[test]
fn metrics_on_imported_features() {
    let dir = TempDir::new().unwrap();
    let mut rows = String::from("source_id,view_index,z0,z1\n");
    for s in 0..4 {
        for v in 0..2 {
            let angle = s as f64 + 0.01 * v as f64;
            rows += &format!("{s},{v},{},{}\n", angle.cos(), angle.sin());
        }
    }
    let feats = dir.path().join("feats.csv");
    fs::write(&feats, rows).unwrap();
    let cfg = json!({ "metrics": { "features": feats, "features_init": feats } });
    let out = run(dir.path(), &cfg, &["metrics"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("out/confusion.json"));
    assert_eq!(report["acr"], 0.0);
    let arc = read_json(&dir.path().join("out/arc.json"));
    assert_eq!(arc["arc"], 1.0);
}

#[test]
fn unknown_preset_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_augoverlap"))
        .args(["scaling", "--preset", "nope", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
