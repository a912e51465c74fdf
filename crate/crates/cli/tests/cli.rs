//! End-to-end checks of the CLI surface: staged runs, report rendering, and
//! config validation.

use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_privleak")
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn run_then_report_renders_tables() {
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(binary())
        .args([
            "--config",
            fixtures_dir().join("mock_run.toml").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--seed",
            "1",
            "--mock-providers",
            "run",
        ])
        .status()
        .unwrap();
    assert!(status.success(), "run failed");
    assert!(out.path().join("report.json").exists());
    assert!(out.path().join("tables/compare.csv").exists());
    assert!(out.path().join("tables/linkage.csv").exists());

    let output = Command::new(binary())
        .args([
            "--config",
            fixtures_dir().join("mock_run.toml").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "report",
            "--metrics",
            "semantic_distance,lexical_distance",
            "--methods",
            "no_sanitization,pii_mask",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two rows: {stdout}");
    assert!(lines[0].starts_with("method,semantic_distance,lexical_distance"));
    assert!(lines[1].starts_with("no_sanitization,"));
}

#[test]
fn staged_subcommand_persists_outputs() {
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(binary())
        .args([
            "--config",
            fixtures_dir().join("mock_run.toml").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--seed",
            "7",
            "aux",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let stages = out.path().join("stages");
    let names: Vec<String> = std::fs::read_dir(&stages)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(
        names.iter().any(|n| n.starts_with("atomize-original")),
        "{names:?}"
    );
    assert!(names.iter().any(|n| n.starts_with("aux-random_k-7")));
    // No sanitizer output yet: the run stopped at the aux stage.
    assert!(!names.iter().any(|n| n.starts_with("sanitized-")));
}

#[test]
fn missing_template_fails_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!(
        r#"
name = "bad"
out_dir = "{out}"
seeds = [1]

[dataset]
original = "{data}"

[judge]
template = "no_such_template"

[providers]
mock = true

[[sanitizers]]
name = "none"
method = "passthrough"
"#,
        out = dir.path().join("out").display(),
        data = fixtures_dir().join("medsynth50.jsonl").display(),
    );
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, config).unwrap();
    let output = Command::new(binary())
        .args(["--config", config_path.to_str().unwrap(), "run"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("no_such_template"), "{stderr}");
    assert!(
        !dir.path().join("out/stages").exists()
            || std::fs::read_dir(dir.path().join("out/stages"))
                .map(|d| d.count() == 0)
                .unwrap_or(true),
        "no stage output may exist after a validation failure"
    );
}
