use std::path::Path;
use std::process::{Command, Output};

fn frost(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frost"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn print_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = frost(&["print-config", "--seed", "9", "--epochs", "3", "--kind", "vanilla"], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["training"]["epochs"], 3);
    assert_eq!(v["model"]["kind"], "vanilla");
}

#[test]
fn config_file_seed_survives_without_flag() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"seed": 17}"#).unwrap();
    let out = frost(&["print-config", "--config", "c.json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 17);
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"halting": {"q": 1.5}}"#).unwrap();
    let out = frost(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("halting.q"));
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = frost(&["verify", "-o", "ok"], dir.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(dir.path().join("ok/verify/summary.json").exists());

    let bad = frost(&["verify", "-o", "bad", "--inject-negative-lambda"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("positivity"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = frost(&["train", "--epochs", "1", "-o", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["training_log.csv", "quantiles.csv", "checkpoint.json", "summary.json", "status.json"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let eval = frost(&["eval", "--checkpoint", "run/checkpoint.json", "-o", "eval"], dir.path());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 8);
}
