use std::path::Path;
use std::process::{Command, Output};

fn sur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sur"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const RUN: &str = r#"{
  "domain": {"dimension": 1, "lower": [0.0], "upper": [1.0], "resolution": 21},
  "kernel": {"family": "matern52", "variance": 1.0, "lengthscale": [0.2]},
  "functional": {"kind": "ibv", "threshold": 0.3},
  "strategy": {"n_steps": 5},
  "replications": 2,
  "seed": 7
}"#;

#[test]
fn run_writes_traces_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.json", RUN);
    let out = tmp.path().join("out");
    let status = sur(&["run", &config, "--out", out.to_str().unwrap()]);
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    for file in [
        "trace_0000.csv",
        "trace_0001.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let trace = std::fs::read_to_string(out.join("trace_0000.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,selected_index,z,H,J_min,J_selected,epsilon,gain,metric_1,metric_2"
    );
    assert_eq!(lines.count(), 6);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.json", RUN);
    let dirs: Vec<_> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    for dir in &dirs {
        assert!(sur(&["run", &config, "--out", dir.to_str().unwrap()])
            .status
            .success());
    }
    for file in [
        "trace_0000.csv",
        "trace_0001.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(dirs[0].join(file)).unwrap(),
            std::fs::read(dirs[1].join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn seed_override_changes_the_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.json", RUN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(sur(&["run", &config, "--out", a.to_str().unwrap()])
        .status
        .success());
    assert!(sur(&[
        "run",
        &config,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "8",
        "--replications",
        "1"
    ])
    .status
    .success());
    assert!(!b.join("trace_0001.csv").exists());
    assert_ne!(
        std::fs::read(a.join("trace_0000.csv")).unwrap(),
        std::fs::read(b.join("trace_0000.csv")).unwrap()
    );
}

#[test]
fn noisy_expected_improvement_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = RUN
        .replace(r#""kind": "ibv", "threshold": 0.3"#, r#""kind": "ei""#)
        .replace(
            r#""resolution": 21"#,
            r#""resolution": 21, "noise": {"mode": "constant", "value": 0.1}"#,
        );
    let config = write_config(tmp.path(), "ei.json", &body);
    let output = sur(&[
        "run",
        &config,
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("noiseless"));
}

#[test]
fn malformed_and_missing_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(
        tmp.path(),
        "bad.json",
        &RUN.replace(r#""resolution": 21"#, r#""resolution": 1"#),
    );
    assert_eq!(sur(&["run", &bad]).status.code(), Some(2));
    let unknown = write_config(
        tmp.path(),
        "unknown.json",
        &RUN.replace(r#""seed": 7"#, r#""seed": 7, "colour": 1"#),
    );
    assert_eq!(sur(&["run", &unknown]).status.code(), Some(2));
    let missing = tmp.path().join("nope.json");
    assert_eq!(
        sur(&["run", missing.to_str().unwrap()]).status.code(),
        Some(4)
    );
}

#[test]
fn compare_has_one_row_per_spec_and_step() {
    let tmp = tempfile::tempdir().unwrap();
    let body = RUN
        .replace(
            r#""functional": {"kind": "ibv", "threshold": 0.3}"#,
            r#""functionals": [{"kind": "ibv", "threshold": 0.3}, {"kind": "vev", "threshold": 0.3}]"#,
        )
        .replace(r#""replications": 2"#, r#""replications": 1"#);
    let config = write_config(tmp.path(), "compare.json", &body);
    let out = tmp.path().join("out");
    assert!(sur(&["compare", &config, "--out", out.to_str().unwrap()])
        .status
        .success());
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * (5 + 1));
}

#[test]
fn check_passes_and_fails_when_corrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let body = RUN.replace(
        r#""seed": 7"#,
        r#""seed": 7, "check": {"instances": 3, "max_points": 9, "oracle_draws": 20000}"#,
    );
    let config = write_config(tmp.path(), "check.json", &body);
    let out = tmp.path().join("out");
    let clean = sur(&["check", &config, "--out", out.to_str().unwrap()]);
    assert!(
        clean.status.success(),
        "{}",
        String::from_utf8_lossy(&clean.stdout)
    );
    assert!(out.join("check_report.json").exists());
    let corrupt = sur(&[
        "check",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--corrupt",
    ]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&corrupt.stdout).contains("FAIL"));
}
