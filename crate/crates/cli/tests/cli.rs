use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rtp_core::corpus::load_corpus;
use rtp_core::evaluation::{read_scores, write_scores, MetricsReport, ScoreRecord};
use rtp_core::Model;

fn rtp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn rtp")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rtp(dir, args);
    assert!(
        out.status.success(),
        "rtp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--dim",
    "16",
    "--layers",
    "1",
    "--attention-heads",
    "2",
    "--feedforward-dim",
    "32",
    "--max-positions",
    "64",
];

/// Synthesizes a small corpus and trains one epoch on it.
fn trained(dir: &Path) {
    ok(dir, &["synth", "--samples", "80", "--out", "data"]);
    let mut args = vec!["train", "--train", "data/train.jsonl", "--val", "data/val.jsonl", "--out", "run", "--epochs", "1"];
    args.extend_from_slice(TINY);
    ok(dir, &args);
}

#[test]
fn synth_writes_split_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--samples", "50", "--out", "d"]);
    let count = |f: &str| load_corpus(dir.path().join("d").join(f)).unwrap().len();
    assert_eq!((count("train.jsonl"), count("val.jsonl"), count("test.jsonl")), (40, 5, 5));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert_eq!(m["config"]["synth"]["samples"], 50);
    assert!(dir.path().join("d/synth_manifest.json").exists());
    assert!(!dir.path().join("d/train.jsonl.tmp").exists());
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rtp(dir.path(), &["synth", "--samples", "0"]).status.code(), Some(1));
    let missing = rtp(dir.path(), &["train", "--train", "nope.jsonl", "--val", "nope.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(rtp(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(rtp(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.toml"), "samples = 30\nseed = 9\n").unwrap();
    ok(dir.path(), &["synth", "--config", "synth.toml", "--seed", "4", "--out", "d"]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["synth"]["samples"], 30);
    assert_eq!(m["seed"], 4);

    fs::write(dir.path().join("bad.toml"), "sampels = 30\n").unwrap();
    assert_eq!(rtp(dir.path(), &["synth", "--config", "bad.toml"]).status.code(), Some(1));
}

#[test]
fn plain_classifier_flags() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--samples", "40", "--out", "data"]);
    let mut args = vec![
        "train", "--train", "data/train.jsonl", "--val", "data/val.jsonl", "--out", "run", "--epochs", "1",
        "--gamma2", "0", "--gamma3", "0", "--gamma4", "0", "--gamma5", "0",
    ];
    args.extend_from_slice(TINY);
    ok(dir.path(), &args);
    let log = fs::read_to_string(dir.path().join("run/log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let terms = &last["train_loss_terms"];
    let total = terms["total"].as_f64().unwrap();
    assert!((total - 2.0 * terms["ce_main"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn eval_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let table = ok(d, &["eval", "--checkpoint", "run/best.ckpt", "--corpus", "data/test.jsonl", "--out", "ev"]);
    assert_eq!(table.lines().count(), 9);
    assert!(table.starts_with("clf_f1"));
    let report: MetricsReport = serde_json::from_slice(&fs::read(d.join("ev/report.json")).unwrap()).unwrap();
    assert!((report.perf - (report.token_f1 + report.iou_f1 + report.comprehensiveness - report.sufficiency)).abs() < 1e-9);

    // Ground truth as external scores reaches the agreement maxima.
    let test = load_corpus(d.join("data/test.jsonl")).unwrap();
    let oracle: Vec<ScoreRecord> = test
        .iter()
        .flat_map(|s| {
            s.positive_classes()
                .map(|c| ScoreRecord {
                    sample_id: s.id.clone(),
                    class_index: c,
                    scores: s.ground_truth(c).iter().map(|&g| f64::from(g)).collect(),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut buf = Vec::new();
    write_scores(&oracle, &mut buf).unwrap();
    fs::write(d.join("oracle.jsonl"), &buf).unwrap();
    ok(d, &[
        "eval", "--checkpoint", "run/best.ckpt", "--corpus", "data/test.jsonl", "--scores-in", "oracle.jsonl",
        "--out", "ev2", "--no-faithfulness",
    ]);
    let report: MetricsReport = serde_json::from_slice(&fs::read(d.join("ev2/report.json")).unwrap()).unwrap();
    assert_eq!(report.d_token_f1, 1.0);
    assert_eq!(report.auc_pr, 1.0);

    fs::write(d.join("short.jsonl"), &buf[..buf.iter().position(|&b| b == b'\n').unwrap() + 1]).unwrap();
    let short = rtp(d, &["eval", "--checkpoint", "run/best.ckpt", "--corpus", "data/test.jsonl", "--scores-in", "short.jsonl"]);
    assert_eq!(short.status.code(), Some(1));

    ok(d, &["explain", "--checkpoint", "run/best.ckpt", "--corpus", "data/test.jsonl", "--index", "2", "--out", "ex"]);
    let html = fs::read_to_string(d.join("ex/explain.html")).unwrap();
    assert!(html.contains("<span class=\"tok\""));
    let model = Model::load_checkpoint(d.join("run/best.ckpt")).unwrap();
    let sample = &test[2];
    let out = model.predict(&sample.tokens).unwrap();
    let scores = read_scores(d.join("ex/scores.jsonl")).unwrap();
    assert_eq!(scores.len(), model.config().num_classes);
    for r in &scores {
        assert_eq!(r.sample_id, sample.id);
        for (a, b) in r.scores.iter().zip(out.mask.class(r.class_index)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert_eq!(html.matches("<span class=\"tok\"").count(), sample.tokens.len());

    fs::write(d.join("tokens.txt"), "1 2 3\n4 5").unwrap();
    ok(d, &["explain", "--checkpoint", "run/best.ckpt", "--tokens", "tokens.txt", "--class", "1", "--out", "ex3"]);
    let bad = rtp(d, &["explain", "--checkpoint", "run/best.ckpt", "--tokens", "tokens.txt", "--class", "3"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--samples", "40", "--out", "data"]);
    let mut args = vec![
        "train", "--train", "data/train.jsonl", "--val", "data/val.jsonl", "--out", "run", "--epochs", "2",
        "--learning-rate", "1e300", "--batch-size", "4",
    ];
    args.extend_from_slice(TINY);
    let out = rtp(dir.path(), &args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
