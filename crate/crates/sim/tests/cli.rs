use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lplr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lplr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

const CONFIG: &str = r#"{
    "name": "tiny",
    "kind": "coverage_audit",
    "seed": 2,
    "replications": 2,
    "grid": [512],
    "env": {
        "kind": "design",
        "atoms": [[0.6, 0.3], [-0.6, 0.3]],
        "theta": [0.6, 0.5],
        "noise": {"kind": "bernoulli"}
    }
}"#;

#[test]
fn run_writes_summary_and_report_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), CONFIG).unwrap();
    let out = lplr(&["run", "tiny.json", "--out-dir", "out", "--threads", "1"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("coverage"), "{stdout}");
    let summary = dir.path().join("out/tiny/summary.json");
    assert!(summary.is_file());
    assert!(dir.path().join("out/tiny/coverage.csv").is_file());

    let report = lplr(&["report", "out/tiny/summary.json"], dir.path());
    assert_eq!(report.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&report.stdout).contains("tiny"));
}

#[test]
fn seed_flag_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), CONFIG).unwrap();
    for (seed, out) in [("2", "a"), ("2", "b"), ("3", "c")] {
        let o = lplr(&["run", "tiny.json", "--seed", seed, "--out-dir", out], dir.path());
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("tiny/verification.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = lplr(&["run", "nope.json"], dir.path());
    assert_eq!(missing.status.code(), Some(1));

    fs::write(dir.path().join("tiny.json"), CONFIG).unwrap();
    let refused = lplr(&["run", "tiny.json", "--zero-noise"], dir.path());
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("zero-noise"));
    assert!(!dir.path().join("runs").exists());

    let bad = CONFIG.replace("\"replications\": 2", "\"replications\": 0");
    fs::write(dir.path().join("bad.json"), bad).unwrap();
    assert_eq!(lplr(&["run", "bad.json"], dir.path()).status.code(), Some(1));

    let report = lplr(&["report", "missing.json"], dir.path());
    assert_eq!(report.status.code(), Some(1));
}

#[test]
fn zero_noise_runs_when_privacy_is_optional() {
    let dir = tempfile::tempdir().unwrap();
    let config = CONFIG.replace("\"grid\"", "\"privacy\": {\"require_privacy\": false},\n    \"grid\"");
    fs::write(dir.path().join("tiny.json"), config).unwrap();
    let out = lplr(&["run", "tiny.json", "--zero-noise"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("runs/tiny/summary.json").is_file());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lplr(&["selftest", "--out-dir", "st"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("moments"));
    assert!(stdout.contains("certificates"));
}
