//! CLI contract tests: exit codes, error messages, and file handling.

use std::path::Path;
use std::process::{Command, Output};

fn cadtext(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadtext"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn cadtext")
}

fn write_corpus(path: &Path, with_description: bool) {
    let mut lines = String::new();
    for i in 0..20 {
        let desc = if with_description {
            format!(r#","description":"unit {i}""#)
        } else {
            String::new()
        };
        lines.push_str(&format!(
            r#"{{"id":"r{i}","assembly_name":"gear box {i}","part_names":["gear {i}","housing {i}","shaft {i}"]{desc}}}"#
        ));
        lines.push('\n');
    }
    std::fs::write(path, lines).unwrap();
}

#[test]
fn missing_input_exits_nonzero_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = cadtext(
        &["preprocess", "--in", "missing.jsonl", "--out", "clean.jsonl", "--stats-out", "stats.json"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.path().join("clean.jsonl").exists(), "partial output left behind");
    assert!(!dir.path().join("stats.json").exists());
}

#[test]
fn invalid_learning_rate_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"), false);
    let out = cadtext(
        &["train", "--objective", "mlm", "--data", "corpus.jsonl", "--lr", "-0.5", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "stderr: {stderr}");
}

#[test]
fn unknown_case_lists_valid_cases() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"), false);
    let out = cadtext(
        &["make-pairs", "--in", "corpus.jsonl", "--case", "case9", "--out", "pairs.jsonl"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("case3"), "stderr should list valid cases: {stderr}");
}

#[test]
fn case4_without_descriptions_is_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"), false);
    let out = cadtext(
        &["make-pairs", "--in", "corpus.jsonl", "--case", "case4", "--out", "pairs.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("description"), "stderr: {stderr}");
}

#[test]
fn case4_with_descriptions_builds_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"), true);
    let out = cadtext(
        &["make-pairs", "--in", "corpus.jsonl", "--case", "case4", "--out", "pairs.jsonl"],
        dir.path(),
    );
    assert!(out.status.success());
    let pairs = std::fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 40);
}

#[test]
fn eval_n_larger_than_test_set_advises_smaller_n() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"), false);
    // Build a tiny checkpoint first.
    let out = cadtext(
        &[
            "train", "--objective", "contrastive", "--data", "corpus.jsonl", "--epochs", "1",
            "--batch-size", "4", "--max-len", "16", "--out", "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cadtext(
        &[
            "eval-zeroshot", "--checkpoint", "run/checkpoint.json", "--test", "corpus.jsonl",
            "--n", "100", "--report", "zs.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("smaller"), "stderr: {stderr}");
}

#[test]
fn malformed_lines_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = concat!(
        r#"{"assembly_name":"line holder","part_names":["top line holder","rod shaft"]}"#,
        "\n",
        "this is not json\n",
        r#"{"assembly_name":"bed frame","part_names":["slat","panel"]}"#,
        "\n",
    );
    std::fs::write(dir.path().join("corpus.jsonl"), corpus).unwrap();
    let out = cadtext(
        &["preprocess", "--in", "corpus.jsonl", "--out", "clean.jsonl", "--stats-out", "stats.json"],
        dir.path(),
    );
    assert!(out.status.success());
    let report = std::fs::read_to_string(dir.path().join("clean.report.txt")).unwrap();
    assert!(report.contains("line 2:"), "report: {report}");
    let clean = std::fs::read_to_string(dir.path().join("clean.jsonl")).unwrap();
    assert_eq!(clean.lines().count(), 2);
}

#[test]
fn manifests_are_written_alongside_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cadtext(
        &["generate-synth", "--out", "corpus.jsonl", "--n", "30", "--seed", "1"],
        dir.path(),
    );
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("corpus.jsonl.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "generate-synth");
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["wall_clock_seconds"].is_number());
}

#[test]
fn data_dir_env_var_resolves_relative_inputs() {
    let data_dir = tempfile::tempdir().unwrap();
    let work_dir = tempfile::tempdir().unwrap();
    write_corpus(&data_dir.path().join("corpus.jsonl"), false);
    let out = Command::new(env!("CARGO_BIN_EXE_cadtext"))
        .args(["preprocess", "--in", "corpus.jsonl", "--out", "clean.jsonl", "--stats-out", "stats.json"])
        .current_dir(work_dir.path())
        .env("CADTEXT_DATA_DIR", data_dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work_dir.path().join("clean.jsonl").exists());
}
