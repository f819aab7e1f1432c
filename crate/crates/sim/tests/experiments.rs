use std::fs;

use lplr_sim::config::ExperimentKind;
use lplr_sim::output::{write_outcome, SUMMARY_FILE};
use lplr_sim::report::{comparison_table, load_summary};
use lplr_sim::{run_experiment, ExperimentConfig, Overrides, SimError};

fn parse(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn small_mad() -> ExperimentConfig {
    parse(
        r#"{
            "name": "small_mad",
            "kind": "mad_curve",
            "seed": 3,
            "replications": 3,
            "grid": [256, 512, 1024, 2048],
            "env": {
                "kind": "design",
                "atoms": [[0.6, 0.3], [0.6, -0.3], [-0.6, 0.3], [-0.6, -0.3]],
                "theta": [0.6, 0.5],
                "noise": {"kind": "bernoulli"}
            },
            "estimators": ["lplr", "input_ridge", "input_bias_corrected"]
        }"#,
    )
}

fn config_error(result: Result<(), SimError>) -> String {
    match result {
        Err(SimError::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn injected_truth_has_zero_regret_and_traces_are_monotone() {
    let config = parse(
        r#"{
            "name": "truth",
            "kind": "regret_curve",
            "seed": 4,
            "replications": 2,
            "grid": [1024, 2048, 4096, 8192],
            "privacy": {"require_privacy": false},
            "env": {"kind": "spread_pair", "contexts": 4, "spread": 0.3, "theta": [0.6, 0.8]},
            "policies": ["injected_truth", "lplr_elimination"],
            "trace_stride": 32
        }"#,
    );
    let out = run_experiment(&config, Some(1)).unwrap();
    assert!(out.summary.gates["injected_truth_zero_regret"]);
    assert!(out.summary.gates["traces_monotone"]);
    assert!(out.summary.slope("injected_truth", "final_regret").is_none());
    let traces = out
        .files
        .iter()
        .filter(|f| f.path.starts_with("traces/injected_truth"))
        .count();
    assert_eq!(traces, 8);
    let trace = out.files.iter().find(|f| f.path.starts_with("traces/lplr_elimination")).unwrap();
    let text = String::from_utf8(trace.bytes.clone()).unwrap();
    assert!(text.starts_with("t,cum_regret,active_set_size,epoch\n"));
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let config = small_mad();
    let a = run_experiment(&config, Some(1)).unwrap();
    let b = run_experiment(&config, Some(3)).unwrap();
    assert_eq!(a.files, b.files);
    assert_eq!(a.summary, b.summary);
    let mut reseeded = config.clone();
    reseeded.apply(&Overrides { seed: Some(99), ..Default::default() }).unwrap();
    let c = run_experiment(&reseeded, Some(1)).unwrap();
    assert_ne!(a.files, c.files);
}

#[test]
fn mad_curve_reports_slopes_and_gates() {
    let out = run_experiment(&small_mad(), Some(1)).unwrap();
    let s = &out.summary;
    assert_eq!(s.kind, ExperimentKind::MadCurve);
    for series in ["lplr", "input_ridge", "input_bias_corrected"] {
        assert!(s.slope(series, "mad").is_some_and(f64::is_finite), "{series}");
    }
    for gate in ["lplr_mad_slope", "input_floor_slope", "input_floor_margin"] {
        assert!(s.gates.contains_key(gate), "{gate}");
    }
    assert_eq!(s.points.iter().filter(|p| p.metric == "mad").count(), 12);
    assert!(s.points.iter().all(|p| p.count == 3));
}

#[test]
fn validation_rejects_bad_configs() {
    let mut c = small_mad();
    c.grid = vec![512, 256, 1024, 2048];
    assert!(config_error(c.validate()).contains("increasing"));

    let mut c = small_mad();
    c.grid.truncate(3);
    assert!(config_error(c.validate()).contains("4 grid points"));

    let mut c = small_mad();
    c.replications = 0;
    assert!(config_error(c.validate()).contains("replications"));

    let mut c = small_mad();
    c.estimators.push(lplr_sim::config::EstimatorKind::NonprivateRidge);
    assert!(config_error(c.validate()).contains("require_privacy"));

    let mut c = small_mad();
    c.name = "../escape".into();
    assert!(config_error(c.validate()).contains("plain file name"));

    let mut c = small_mad();
    c.env = None;
    assert!(config_error(c.validate()).contains("env"));

    let mut c = small_mad();
    c.privacy.alpha = 0.0;
    assert!(c.validate().is_err());

    assert!(ExperimentConfig::from_json(r#"{"name": "x", "kind": "mad_curve", "colour": 1}"#).is_err());
    // Validation runs before any work.
    let mut c = small_mad();
    c.replications = 0;
    assert!(matches!(run_experiment(&c, Some(1)), Err(SimError::Config(_))));
}

#[test]
fn zero_noise_is_refused_when_privacy_is_required() {
    let mut c = small_mad();
    let err = c.apply(&Overrides { zero_noise: true, ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("refused"));

    c.privacy.require_privacy = false;
    c.apply(&Overrides { zero_noise: true, ..Default::default() }).unwrap();
    assert!(c.privacy.zero_noise);
    c.validate().unwrap();
}

#[test]
fn config_hash_ignores_output_location_only() {
    let a = small_mad();
    let mut b = a.clone();
    b.out_dir = Some("elsewhere".into());
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn outcome_directory_is_replaced_whole() {
    let root = tempfile::tempdir().unwrap();
    let out = run_experiment(&small_mad(), Some(1)).unwrap();
    let dir = write_outcome(&out, root.path()).unwrap();
    fs::write(dir.join("stale.csv"), "old").unwrap();
    let again = write_outcome(&out, root.path()).unwrap();
    assert_eq!(dir, again);
    assert!(!dir.join("stale.csv").exists());
    assert!(dir.join("results.csv").is_file());
    // No staging directories left behind.
    assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);

    let loaded = load_summary(&dir.join(SUMMARY_FILE)).unwrap();
    assert_eq!(loaded, out.summary);
    let table = comparison_table(&[loaded]);
    assert!(table.contains("small_mad"));
    assert!(table.contains("lplr/mad"));

    // A directory that is not an earlier run is never overwritten.
    let foreign = root.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("keep.txt"), "mine").unwrap();
    let mut named = out.clone();
    named.summary.name = "foreign".into();
    assert!(write_outcome(&named, root.path()).is_err());
    assert_eq!(fs::read_to_string(foreign.join("keep.txt")).unwrap(), "mine");
}
