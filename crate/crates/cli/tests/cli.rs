use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_causynth"))
}

fn smoke_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn edited_manifest(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut m: Value = serde_json::from_str(&fs::read_to_string(smoke_manifest()).unwrap()).unwrap();
    edit(&mut m);
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
    p
}

#[test]
fn repeated_runs_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let m = smoke_manifest();
    let a = run(&["run", "--manifest", m.to_str().unwrap(), "--out", "runs"], tmp.path());
    let b = run(&["run", "--manifest", m.to_str().unwrap(), "--out", "runs", "--workers", "1"], tmp.path());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    let first = fs::read(tmp.path().join("runs/smoke/report.json")).unwrap();
    let second = fs::read(tmp.path().join("runs/smoke-2/report.json")).unwrap();
    assert_eq!(first, second);
    let r: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(r["status"], "complete");
    assert_eq!(r["models"].as_array().unwrap().len(), 4);
    assert!(tmp.path().join("runs/smoke/figures/sweep.svg").exists());
}

#[test]
fn dry_run_echoes_plan_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["run", "--manifest", smoke_manifest().to_str().unwrap(), "--out", "runs", "--dry-run"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("\"run_id\": \"smoke\""));
    assert!(text.contains("stage attack"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn invalid_manifest_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let m = edited_manifest(tmp.path(), |m| m["privacy"]["clip_norm"] = (-1.0).into());
    let o = run(&["run", "--manifest", m.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn unregistered_seed_label_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let m = edited_manifest(tmp.path(), |m| m["seed_labels"] = serde_json::json!(["data"]));
    let o = run(&["run", "--manifest", m.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not registered"));
}

#[test]
fn stage_failure_exits_three_and_keeps_partials() {
    let tmp = tempfile::tempdir().unwrap();
    let m = edited_manifest(tmp.path(), |m| m["utility"]["tasks"] = 99.into());
    let o = run(&["run", "--manifest", m.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let dir = tmp.path().join("runs/smoke");
    assert!(dir.join("synthetic/causal-dp.csv").exists());
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["status"], "partial");
    let status = |name: &str| r["stages"].as_array().unwrap().iter().find(|s| s["name"] == name).unwrap()["status"].clone();
    assert_eq!(status("utility"), "failed");
    assert_eq!(status("attack"), "skipped");
}

#[test]
fn report_renders_and_rejects_unknown_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["run", "--manifest", smoke_manifest().to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let report = tmp.path().join("runs/smoke/report.json");
    let o = run(&["report", report.to_str().unwrap(), "--out", "rendered"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let md = fs::read_to_string(tmp.path().join("rendered/report.md")).unwrap();
    assert!(md.contains("| DP | Feature Extractor | Attack Model | Accuracy | PA | NA |"));
    assert_eq!(md, fs::read_to_string(tmp.path().join("runs/smoke/report.md")).unwrap());
    assert!(tmp.path().join("rendered/figures/delta-causal-dp-vs-none.svg").exists());

    let mut v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    v["schema_version"] = 7.into();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    let o = run(&["report", bad.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn accountant_reports_every_grid_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["accountant", "--n", "1000", "--batch", "100", "--epochs", "50", "--sigma", "1,2", "--clip", "0.55,0.65"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let cells: Vec<Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cells.len(), 4);
    assert_eq!(cells[0]["C"], 0.55);
    assert_eq!(cells[0]["T"], 500);

    let o = run(&["accountant", "--n", "1000", "--batch", "100", "--epochs", "50", "--target-epsilon", "3.9"], tmp.path());
    let ledger: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((ledger["epsilon"].as_f64().unwrap() - 3.9).abs() < 0.05);
    assert_eq!(ledger["sampling_assumption"], "poisson-approx");
}

#[test]
fn data_train_sample_attack_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = |o: Output| assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    ok(run(&["gen-data", "--k", "5", "--continuous", "1", "--n", "100", "--seed", "2", "--out", "d.csv", "--graph-out", "g.json"], tmp.path()));
    fs::write(tmp.path().join("m.json"), r#"{"config": {"latent_dim": 2, "hidden": 6}, "train": {"batch_size": 20, "epochs": 1}}"#).unwrap();
    ok(run(&["train", "--data", "d.csv", "--graph", "g.json", "--model-config", "m.json", "--clip", "1", "--sigma", "1", "--out", "model.json"], tmp.path()));
    let ckpt: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(ckpt["training"]["privacy"]["sigma"], 1.0);
    ok(run(&["sample", "--model", "model.json", "--n", "30", "--out", "s.csv"], tmp.path()));
    assert_eq!(fs::read_to_string(tmp.path().join("s.csv")).unwrap().lines().count(), 31);
    let attack = [
        "attack", "--data", "d.csv", "--model-config", "m.json", "--mode", "associational", "--targets", "1", "--reps", "2",
        "--train-size", "30", "--samples", "2", "--sample-size", "30", "--extractors", "naive,hist", "--classifiers", "LR", "--out", "a.json",
    ];
    ok(run(&attack, tmp.path()));
    let o = run(&["attack-diff", "a.json", "a.json"], tmp.path());
    let diff: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(diff["cells"].as_array().unwrap().iter().all(|c| c["delta"] == 0.0));
    ok(run(&["utility", "--original", "d.csv", "--synthetic", "s.csv", "--tasks", "1", "--classifiers", "knn", "--out", "runs"], tmp.path()));
    assert!(tmp.path().join("runs/utility/utility.csv").exists());
}

#[test]
fn bad_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--data", "missing.csv", "--out", "m.json"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["accountant", "--n", "10", "--batch", "20", "--epochs", "1", "--sigma", "1"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["theory", "--target", "nope", "--trials", "1"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"], tmp.path()).status.code(), Some(2));
}

#[test]
fn theory_writes_trials_and_strata() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["theory", "--n", "100", "--trials", "3", "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("runs/theory/trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let s: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("runs/theory/summary.json")).unwrap()).unwrap();
    let total: u64 = s["strata"].as_array().unwrap().iter().map(|x| x["trials"].as_u64().unwrap()).sum();
    assert_eq!(total, 3);
}
