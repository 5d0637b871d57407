mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcnet"))
        .args(args)
        .output()
        .expect("spawn dcnet")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn write_small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(&path, common::SMALL).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = dcnet(&["gen-data", "--config", &s(&missing), "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().contains("nope.cfg"), "{err}");
    assert_eq!(err["exit"], 1);
}

#[test]
fn unknown_verb_and_bad_key_are_usage_errors() {
    let out = dcnet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.nonsense = 3\n").unwrap();
    let out = dcnet(&["gen-data", "--config", &s(&cfg), "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"]
        .as_str()
        .unwrap()
        .contains("train.nonsense"));
}

#[test]
fn report_on_empty_dir_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcnet(&["report", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "missing-artifact");
}

#[test]
fn verify_bounds_writes_one_row_per_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcnet(&[
        "verify-bounds",
        "--specs",
        "4",
        "--samples",
        "5000",
        "--seed",
        "3",
        "--out",
        &s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (i, name) in header.iter().enumerate().filter(|(_, n)| n.starts_with("pass_")) {
        assert!(rows.iter().all(|r| r[i] == "true"), "{name}");
    }

    let out = dcnet(&["verify-bounds", "--samples", "10", "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcnet(&["grad-check", "--batches", "5", "--out", &s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("gradcheck.csv"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    let out = dcnet(&[
        "grad-check",
        "--batches",
        "5",
        "--tolerance",
        "1e-14",
        "--out",
        &s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "check-failed");
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));

    for run in [&a, &b] {
        let out = dcnet(&["train", "--config", &cfg, "--seed", "2", "--out", &s(run)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["metrics.csv", "report.json", "predictions.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }

    // eval re-scores to the same predictions
    let trained = fs::read(a.join("predictions.csv")).unwrap();
    let out = dcnet(&["eval", &s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(a.join("predictions.csv")).unwrap(), trained);
    let eval: Value = serde_json::from_slice(&fs::read(a.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["cil"].as_array().unwrap().len(), 3);

    let out = dcnet(&["train", "--config", &cfg, "--seed", "4", "--out", &s(&c)]);
    assert!(out.status.success());
    let out = dcnet(&["report", &s(&c), "--baseline", &s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&fs::read(c.join("summary.json")).unwrap()).unwrap();
    let changes = summary["baseline"]["config_changes"].as_array().unwrap();
    assert_eq!(changes.len(), 1);
    assert_eq!(changes[0]["key"], "seed");
    assert_eq!(
        (changes[0]["run"].as_str(), changes[0]["baseline"].as_str()),
        (Some("4"), Some("2"))
    );

    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let runs = manifest["runs"].as_array().unwrap();
    let verbs: Vec<&str> = runs.iter().map(|r| r["verb"].as_str().unwrap()).collect();
    assert_eq!(verbs, ["train", "eval"]);
    let report_sha = runs[0]["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|x| x["path"] == "report.json")
        .map(|x| x["sha256"].as_str().unwrap().to_string())
        .unwrap();
    assert_eq!(report_sha.len(), 64);
    assert_eq!(runs[0]["seed"], 2);
}

#[test]
fn eval_without_model_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcnet(&["eval", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "missing-artifact");
}
