use std::path::Path;
use std::process::{Command, Output};

use synthvox_core::config::RunConfig;
use synthvox_core::eval::CSV_HEADER;

fn synthvox(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthvox")).args(args).env("SYNTHVOX_RUNS", root).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn selftest_passes() {
    let root = tempfile::tempdir().unwrap();
    let out = synthvox(root.path(), &["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("gradient checks: pass"), "{stdout}");
    assert!(stdout.contains("all 5 checks passed"), "{stdout}");
}

#[test]
fn usage_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(synthvox(root.path(), &["frobnicate"]).status.code(), Some(2));
    let out = synthvox(root.path(), &["train-style", "--tts.stepz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("tts.stepz"));
    assert_eq!(synthvox(root.path(), &["sweep", "--axis=diagonal"]).status.code(), Some(2));
    assert_eq!(synthvox(root.path(), &["eval", "--config", "/nonexistent/c.json"]).status.code(), Some(2));
}

#[test]
fn missing_prerequisites_exit_3() {
    let root = tempfile::tempdir().unwrap();
    let out = synthvox(root.path(), &["train-tts", "--run=fresh"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("train-style"), "{}", text(&out.stderr));
    assert_eq!(synthvox(root.path(), &["eval", "--run=fresh"]).status.code(), Some(3));
}

#[test]
fn smoke_run_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("s");
    let ok = |args: &[&str]| {
        let out = synthvox(root.path(), args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", text(&out.stderr));
        text(&out.stdout)
    };
    ok(&["gen-world", "--run=s", "--smoke", "--tts.steps=30"]);
    let stored = RunConfig::from_json(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let mut want = RunConfig::smoke();
    want.tts.steps = 30;
    assert_eq!(stored, want);
    assert!(run.join("probes.json").exists() && run.join("dataset.json").exists());

    ok(&["train-style", "--run=s"]);
    ok(&["train-tts", "--run=s"]);
    assert!(run.join("tts.json").exists() && run.join("tts.bin").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 31);

    ok(&["eval", "--run=s"]);
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().next(), Some(CSV_HEADER));
    // header + (6 pairs + mean) per modality
    assert_eq!(eval.lines().count(), 15);

    ok(&["sweep", "--run=s", "--axis=style"]);
    let sweep = std::fs::read_to_string(run.join("sweep_style.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + want.eval.grid.len());

    ok(&["synth", "--run=s", "--count=2", "--modality=audio"]);
    let items: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("synth_audio.json")).unwrap()).unwrap();
    assert_eq!(items.as_array().unwrap().len(), 2);
    assert!(run.join("log.txt").exists());
}
