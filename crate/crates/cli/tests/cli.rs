use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_neural-bayes"));
    cmd.env_remove("NB_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn moons(dir: &TempDir, n: &str, dim: &str) -> PathBuf {
    let path = dir.path().join(format!("moons-{n}-{dim}.csv"));
    ok(&["gen-data", "--kind", "moons", "--n", n, "--dim", dim, "--seed", "3", "--out", s(&path)]);
    path
}

fn train_small(data: &Path, out: &Path) {
    ok(&[
        "train-dml", "--data", s(data), "--epochs", "30", "--restarts", "1", "--mbs", "50", "--bs", "100",
        "--seed", "4", "--out-dir", s(out),
    ]);
}

#[test]
fn lifted_moons_have_expected_shape() {
    let dir = TempDir::new().unwrap();
    let path = moons(&dir, "1000", "512");
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2001);
    assert!(lines.iter().all(|l| l.split(',').count() == 513));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(run(&["gen-data", "--kind", "spirals", "--out", s(&out)]).status.code(), Some(2));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"kind": "moons", "colour": "red"}"#).unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));

    let images = dir.path().join("images.idx");
    fs::write(&images, b"").unwrap();
    let res = run(&["train-mim", "--data", s(&images), "--out-dir", s(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["gen-data", "--n", "20", "--seed", "11", "--out", s(&a)]);
    let out = bin().args(["gen-data", "--n", "20", "--out", s(&b)]).env("NB_SEED", "11").output().unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = moons(&dir, "50", "2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_small(&data, &a);
    train_small(&data, &b);
    let manifest = fs::read_to_string(a.join("MANIFEST.json")).unwrap();
    assert_eq!(manifest, fs::read_to_string(b.join("MANIFEST.json")).unwrap());
    for name in ["checkpoint.json", "checkpoint.bin", "log.jsonl", "metrics.csv", "labels.csv", "summary.json", "config.json"] {
        assert!(manifest.contains(&format!("\"{name}\"")), "{name} missing from manifest");
    }
}

#[test]
fn sweep_writes_one_directory_per_entry() {
    let dir = TempDir::new().unwrap();
    let data = moons(&dir, "30", "2");
    let sweep = dir.path().join("sweep.json");
    fs::write(&sweep, r#"[{"recipe": {"objective": {"beta": 1.0}}}, {"recipe": {"objective": {"beta": 3.0}}}]"#).unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "train-dml", "--data", s(&data), "--epochs", "2", "--restarts", "1", "--mbs", "30", "--bs", "60",
        "--sweep", s(&sweep), "--out-dir", s(&out),
    ]);
    for (run, beta) in [("run-000", 1.0), ("run-001", 3.0)] {
        let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(run).join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg["recipe"]["objective"]["beta"], beta);
    }
}

#[test]
fn gradcheck_passes_and_control_fails() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.json");
    ok(&["gradcheck", "--cases", "4", "--seed", "2", "--report", s(&report)]);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["failed"].as_array().unwrap().len(), 0);
    assert_eq!(parsed["passed"], 16);

    let out = run(&["gradcheck", "--cases", "3", "--seed", "2", "--negative-control"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!((0..3).all(|c| err.contains(&format!("theorem1-control-{c}"))), "{err}");
}

#[test]
fn probe_reports_and_leaves_checkpoint_alone() {
    let dir = TempDir::new().unwrap();
    let data = moons(&dir, "50", "2");
    let run_dir = dir.path().join("run");
    train_small(&data, &run_dir);
    let ckpt = run_dir.join("checkpoint.json");
    let before = (fs::read(&ckpt).unwrap(), fs::read(run_dir.join("checkpoint.bin")).unwrap());

    let stdout = ok(&["probe", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "h0", "--epochs", "5"]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["test_samples"], 20);
    assert!((0.0..=1.0).contains(&report["test_accuracy"].as_f64().unwrap()));
    assert_eq!(before, (fs::read(&ckpt).unwrap(), fs::read(run_dir.join("checkpoint.bin")).unwrap()));

    let bad = run(&["probe", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "h42"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("h0"));
}

#[test]
fn grid_export_matches_training_labels() {
    let dir = TempDir::new().unwrap();
    let data = moons(&dir, "50", "16");
    let run_dir = dir.path().join("run");
    train_small(&data, &run_dir);
    let ckpt = run_dir.join("checkpoint.json");

    let grid = dir.path().join("grid.csv");
    ok(&["export-grid", "--checkpoint", s(&ckpt), "--data", s(&data), "--resolution", "25", "--out", s(&grid)]);
    let text = fs::read_to_string(&grid).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,argmax_label,max_prob"));
    assert_eq!(text.lines().count(), 626);

    let at = dir.path().join("at.csv");
    ok(&["export-grid", "--checkpoint", s(&ckpt), "--data", s(&data), "--at-data", "--out", s(&at)]);
    let grid_labels: Vec<String> =
        fs::read_to_string(&at).unwrap().lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect();
    let trained: Vec<String> = fs::read_to_string(run_dir.join("labels.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(grid_labels, trained);
}

#[test]
fn grid_needs_planar_base_data() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("three.csv");
    fs::write(&data, "x0,x1,x2,component\n0,0,0,0\n1,1,1,1\n2,0,1,0\n").unwrap();
    let ckpt = dir.path().join("missing.json");
    let out = run(&["export-grid", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dir.path().join("g.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("two-dimensional"));
}
