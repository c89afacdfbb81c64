use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use htnet::data::load_poseset;
use htnet::Skeleton;
use serde_json::Value;

fn htnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htnet")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join(format!("synth_{n}.json"));
    stdout_json(&htnet(&["synth", "--n", &n.to_string(), "--seed", "1", "--out", s(&path)]));
    path
}

/// Tiny run: C=24, M=1, one epoch.
fn train_tiny(dir: &Path, data: &Path) -> PathBuf {
    let config = dir.join("tiny.json");
    std::fs::write(&config, r#"{"model": {"channels": 24, "mixers": 1}, "train": {"epochs": 1, "batch_size": 4}}"#)
        .unwrap();
    let out = dir.join("run");
    let v = stdout_json(&htnet(&["train", "--config", s(&config), "--data", s(data), "--out", s(&out)]));
    assert_eq!(v["steps"], 3);
    out
}

#[test]
fn synth_then_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), 5);
    assert_eq!(load_poseset(&path, &Skeleton::h36m17()).unwrap().len(), 5);
}

#[test]
fn missing_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = htnet(&["train", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data"));

    let o = htnet(&["eval", "--ckpt", "nope.htnc", "--data", "nope.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10);
    let out = train_tiny(dir.path(), &data);
    assert!(out.join("checkpoint.htnc").is_file());
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,epoch,lr,loss"));
    assert_eq!(csv.lines().count(), 4);

    let ckpt = out.join("checkpoint.htnc");
    let report = stdout_json(&htnet(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]));
    for key in ["mpjpe", "p_mpjpe", "pck", "auc", "per_pdof_mpjpe", "per_joint_mpjpe"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let (m, pm) = (report["mpjpe"].as_f64().unwrap(), report["p_mpjpe"].as_f64().unwrap());
    assert!(pm <= m + 1e-9, "{pm} > {m}");

    let o = htnet(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--csv"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);

    let pred = dir.path().join("pred.json");
    let v = stdout_json(&htnet(&["predict", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&pred)]));
    assert_eq!(v["frames"], 10);
    assert_eq!(load_poseset(&pred, &Skeleton::h36m17()).unwrap().len(), 10);
}

#[test]
fn wrong_joint_count_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10);
    let out = train_tiny(dir.path(), &data);

    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&data).unwrap()).unwrap();
    for frame in doc["frames"].as_array_mut().unwrap() {
        frame["p2d"].as_array_mut().unwrap().pop();
        frame["p3d"].as_array_mut().unwrap().pop();
    }
    let short = dir.path().join("short.json");
    std::fs::write(&short, doc.to_string()).unwrap();

    let o = htnet(&["eval", "--ckpt", s(&out.join("checkpoint.htnc")), "--data", s(&short)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("16") && err.contains("17"), "{err}");
}

#[test]
fn corrupt_checkpoint_has_its_own_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4);
    let bad = dir.path().join("bad.htnc");
    std::fs::write(&bad, b"HTNC not really a checkpoint").unwrap();
    let o = htnet(&["eval", "--ckpt", s(&bad), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt checkpoint"));
}

#[test]
fn inspect_default_lands_in_window() {
    let v = stdout_json(&htnet(&["inspect"]));
    let total = v["total"].as_u64().unwrap();
    assert!((2_400_000..=3_600_000).contains(&total), "{total}");
    let blocks: u64 = v["blocks"].as_array().unwrap().iter().map(|b| b["params"].as_u64().unwrap()).sum();
    assert_eq!(blocks, total);

    let small = stdout_json(&htnet(&["inspect", "--channels", "24", "--mixers", "1"]));
    assert_eq!(small["total"], 9808);
    let o = htnet(&["inspect", "--channels", "36"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = htnet(&["gradcheck", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["passed"], true);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4);
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let o = htnet(&["train", "--config", s(&config), "--data", s(&data), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&config, r#"{"trian": {}}"#).unwrap();
    let o = htnet(&["train", "--config", s(&config), "--data", s(&data), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}
