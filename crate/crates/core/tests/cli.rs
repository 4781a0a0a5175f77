use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn endonet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endonet"))
        .env("ENDONET_DATA_DIR", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> serde_json::Value {
    let out = endonet(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json summary on stdout")
}

fn error_json(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not one json object: {text}"))
}

fn digest(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn full_pipeline_on_a_small_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["--seed", "7", "synth", "--out", "data", "--n", "8", "--high-fraction", "0.5"]);
    let manifest = fs::read_to_string(root.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    assert_eq!(manifest.matches("\"High\"").count(), 4);

    ok(root, &["--seed", "1", "split", "--manifest", "data/manifest.jsonl", "--train", "0.5", "--val", "0.25", "--test", "0.25"]);
    ok(root, &["tile", "--manifest", "data/manifest.jsonl", "--out", "regions.jsonl"]);
    ok(
        root,
        &["train-cnn", "--manifest", "data/manifest.jsonl", "--annotations", "data/annotations.jsonl", "--width", "0.125", "--epochs", "1", "--out", "cnn.ckpt"],
    );
    ok(root, &["extract-features", "--manifest", "data/manifest.jsonl", "--cnn", "cnn.ckpt", "--regions", "regions.jsonl", "--out", "f.endf"]);

    let common = ["--manifest", "data/manifest.jsonl", "--features", "f.endf"];
    let det = ["--deterministic", "--seed", "3"];
    let mut hashes = Vec::new();
    for i in 0..2 {
        let pre = format!("pre{i}.ckpt");
        let ft = format!("ft{i}.ckpt");
        let preds = format!("preds{i}.jsonl");
        let report = format!("report{i}.json");
        let png = format!("overlay{i}.png");
        let run = |sub: &str, extra: &[&str]| {
            let mut args: Vec<&str> = det.to_vec();
            args.push(sub);
            args.extend_from_slice(extra);
            ok(root, &args)
        };
        run("pretrain", &[&common[..], &["--epochs", "2", "--out", &pre]].concat());
        run("finetune", &[&common[..], &["--init", &pre, "--epochs", "2", "--out", &ft]].concat());
        run("predict", &[&common[..], &["--model", &ft, "--split", "test", "--out", &preds]].concat());
        let summary = run("evaluate", &["--pred", &preds, "--iterations", "500", "--out", &report]);
        assert_eq!(summary["command"], "evaluate");
        run("visualize", &[&common[..], &["--model", &ft, "--slide", "slide_000", "--out", &png]].concat());
        let names = [pre, ft, preds, report, png.clone(), png.replace(".png", ".json")];
        hashes.push(names.iter().map(|n| digest(&root.join(n))).collect::<Vec<_>>());
    }
    assert_eq!(hashes[0], hashes[1]);

    let preds = fs::read_to_string(root.join("preds0.jsonl")).unwrap();
    assert!(preds.lines().count() >= 1);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("report0.json")).unwrap()).unwrap();
    assert!(report.get("auc").is_some(), "{report}");

    let runs: Vec<_> = fs::read_dir(root.join("runs")).unwrap().collect();
    assert!(runs.len() >= 15);
    for r in runs {
        assert!(r.unwrap().path().join("runlog.json").exists());
    }
}

#[test]
fn evaluate_on_empty_predictions_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let err = error_json(&endonet(dir.path(), &["evaluate", "--pred", "empty.jsonl"]));
    assert_eq!(err["error"], "metrics");
}

#[test]
fn malformed_manifest_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"slide_id":"a","patient_id":"p","path":"a","grade":"Low","subtype":"EndometrioidG1","mpp":1.0}"#;
    fs::write(dir.path().join("m.jsonl"), format!("{good}\n{{\"slide_id\":\n")).unwrap();
    let err = error_json(&endonet(dir.path(), &["tile", "--manifest", "m.jsonl"]));
    assert_eq!(err["line"], 2, "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(endonet(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(endonet(dir.path(), &["evaluate"]).status.code(), Some(2));
    assert_eq!(endonet(dir.path(), &["synth", "--out", "x", "--n", "many"]).status.code(), Some(2));
    assert_eq!(endonet(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for out in ["a", "b"] {
        ok(root, &["--deterministic", "--seed", "5", "synth", "--out", out, "--n", "1"]);
    }
    for f in ["manifest.jsonl", "annotations.jsonl", "slide_000/level0.png"] {
        assert_eq!(digest(&root.join("a").join(f)), digest(&root.join("b").join(f)), "{f}");
    }
}
