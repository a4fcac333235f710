//! End-to-end tests of the `cdse` binary: every command runs, summaries
//! stay machine-parsable, exit codes map to error classes, and repeated
//! runs are byte-identical.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdse"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

/// The single-line summary is the last stdout line.
fn summary(out: &Output) -> String {
    stdout(out).lines().last().unwrap_or_default().to_string()
}

fn assert_ok(out: &Output, command: &str) {
    let line = summary(out);
    assert!(
        out.status.success() && line.starts_with(command) && line.ends_with(" OK"),
        "{command}: status {:?}, summary '{line}', stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = "[model]\n\
    base_width = 4\n\
    input_size = 16\n\
    bottleneck_layers = 1\n\
    conv = plain3x3\n\
    [train]\n\
    epochs = 1\n\
    seed = 9\n\
    [data]\n\
    train_fraction = 0.67\n";

fn synth_tiny(dir: &Path) {
    let out = run_in(dir, &["synth", "--out-dir", "data", "--count", "6", "--size", "16", "--seed", "3"]);
    assert_ok(&out, "synth");
    fs::write(dir.join("cfg.ini"), TINY_CONFIG).unwrap();
}

#[test]
fn help_exits_zero_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = run_in(dir.path(), &["--help"]);
    assert!(root.status.success());
    let text = stdout(&root);
    for name in ["edges", "synth", "train", "eval", "predict", "ablate", "gradcheck"] {
        assert!(text.contains(name), "root help must list {name}");
        let help = run_in(dir.path(), &[name, "--help"]);
        assert!(help.status.success(), "{name} --help failed");
        assert!(stdout(&help).contains("--"), "{name} --help documents flags");
    }
}

#[test]
fn the_pipeline_runs_end_to_end_and_repeats_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    synth_tiny(dir.path());

    let train_args = [
        "train", "--data-dir", "data", "--config", "cfg.ini",
        "--out-ckpt", "m.ckpt", "--log", "train.jsonl",
    ];
    let out = run_in(dir.path(), &train_args);
    assert_ok(&out, "train");
    let ckpt = fs::read(dir.path().join("m.ckpt")).unwrap();
    let log = fs::read(dir.path().join("train.jsonl")).unwrap();
    assert!(!ckpt.is_empty() && !log.is_empty());

    let again = run_in(dir.path(), &train_args);
    assert_ok(&again, "train");
    assert_eq!(ckpt, fs::read(dir.path().join("m.ckpt")).unwrap(), "checkpoints differ across runs");
    assert_eq!(log, fs::read(dir.path().join("train.jsonl")).unwrap(), "logs differ across runs");
    assert_eq!(summary(&out), summary(&again));

    let eval = run_in(
        dir.path(),
        &["eval", "--manifest", "data/manifest.tsv", "--ckpt", "m.ckpt", "--report", "eval.json"],
    );
    assert_ok(&eval, "eval");
    assert!(summary(&eval).contains("dsc="));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    for aggregation in ["micro", "per_image"] {
        for metric in ["accuracy", "precision", "recall", "dsc"] {
            assert!(
                report[aggregation][metric].is_number(),
                "missing {aggregation}.{metric} in {report}"
            );
        }
    }

    let predict = run_in(
        dir.path(),
        &["predict", "--image", "data/img_0000.pgm", "--ckpt", "m.ckpt", "--out-mask", "pred.pgm"],
    );
    assert_ok(&predict, "predict");
    let mask = fs::read(dir.path().join("pred.pgm")).unwrap();
    assert!(mask.starts_with(b"P5\n16 16\n255\n"));
    assert!(mask[13..].iter().all(|b| *b == 0 || *b == 255));
}

#[test]
fn edges_echoes_resolved_defaults_and_handles_flat_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut black = b"P5\n16 16\n255\n".to_vec();
    black.extend([0u8; 256]);
    fs::write(dir.path().join("black.pgm"), &black).unwrap();

    let out = run_in(dir.path(), &["edges", "--input", "black.pgm", "--out", "e.pgm"]);
    assert_ok(&out, "edges");
    let line = summary(&out);
    for token in ["operator=canny", "sigma=1.4", "radius=2", "low=0.1", "high=0.2", "edge_pixels=0"] {
        assert!(line.contains(token), "missing {token} in '{line}'");
    }
    let map = fs::read(dir.path().join("e.pgm")).unwrap();
    assert!(map[13..].iter().all(|b| *b == 0), "an all-black image has no edges");

    let prewitt = run_in(
        dir.path(),
        &["edges", "--input", "black.pgm", "--operator", "prewitt", "--tfrac", "0.2", "--out", "p.pgm"],
    );
    assert_ok(&prewitt, "edges");
    assert!(summary(&prewitt).contains("operator=prewitt tfrac=0.2"));

    let conflict = run_in(
        dir.path(),
        &["edges", "--input", "black.pgm", "--operator", "sobel", "--sigma", "2.0", "--out", "x.pgm"],
    );
    assert_eq!(conflict.status.code(), Some(2), "canny-only flags with sobel are usage errors");
}

#[test]
fn exit_codes_follow_the_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    synth_tiny(dir.path());

    let missing = run_in(dir.path(), &["eval", "--manifest", "no-such.tsv", "--ckpt", "no.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(summary(&missing).ends_with("FAIL"));
    assert!(!missing.stderr.is_empty());

    let no_source = run_in(dir.path(), &["train", "--out-ckpt", "x.ckpt"]);
    assert_eq!(no_source.status.code(), Some(2));
    assert!(summary(&no_source).ends_with("FAIL"));

    let unknown_flag = run_in(dir.path(), &["synth", "--out-dir", "d", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2), "clap usage errors exit 2");

    fs::write(dir.path().join("bad.ini"), "[model]\nwidth = 4\n").unwrap();
    let bad_config = run_in(
        dir.path(),
        &["train", "--data-dir", "data", "--config", "bad.ini", "--out-ckpt", "x.ckpt"],
    );
    assert_eq!(bad_config.status.code(), Some(2), "unknown config keys exit 2");

    let bad_threshold = run_in(
        dir.path(),
        &["predict", "--image", "data/img_0000.pgm", "--ckpt", "x.ckpt", "--out-mask", "m.pgm",
          "--threshold", "1.5"],
    );
    assert_eq!(bad_threshold.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_suite_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gradcheck", "--seed", "1"]);
    assert_ok(&out, "gradcheck");
    let text = stdout(&out);
    for name in ["conv2d stride 1", "batchnorm train", "dice loss", "end-to-end model"] {
        assert!(text.contains(name), "missing check '{name}'");
    }
    assert!(summary(&out).contains("checks="));
}

#[test]
fn ablate_emits_the_fusion_table_with_labeled_rows() {
    let dir = tempfile::tempdir().unwrap();
    synth_tiny(dir.path());

    let out = run_in(
        dir.path(),
        &["ablate", "--axis", "fusion", "--data-dir", "data", "--config", "cfg.ini",
          "--report", "table.json"],
    );
    assert_ok(&out, "ablate");
    let text = stdout(&out);
    let labels =
        ["Simple Concatenation", "Single SENet Concatenation", "Double SENet Concatenation"];
    let mut last = 0;
    for label in labels {
        let pos = text.find(label).unwrap_or_else(|| panic!("missing row '{label}'"));
        assert!(pos > last, "rows out of order at '{label}'");
        last = pos;
    }
    for column in ["Method", "Accuracy", "Precision", "Recall", "DSC"] {
        assert!(text.contains(column), "missing column '{column}'");
    }
    assert!(summary(&out).contains("cells=3 failed=0"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("table.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for (row, label) in rows.iter().zip(labels) {
        assert_eq!(row["label"], label);
        assert!(row["metrics"]["dsc"].is_number());
    }
}
