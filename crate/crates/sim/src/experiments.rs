//! Replicated experiments: one function per experiment kind, fanned out over
//! a rayon pool. Every task owns its random streams, and results are
//! collected in task order, so outputs do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use lplr_core::baselines::{ridge_fit, suffstat_fit, InputPerturbationOracle, PerturbedEstimator, RidgeFactory, SuffstatUcb};
use lplr_core::elimination::{injected_truth_policy, EliminationPolicy, EpochSchedule, LplrFactory};
use lplr_core::environments::{LinearEnv, RewardNoise};
use lplr_core::lplr::{run_oracle, LplrEstimate, OracleConfig};
use lplr_core::oracle::Estimate;
use lplr_core::rng::{Channel, StreamKey};
use lplr_core::trace::{simulate, PeriodView, RegretTrace};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{coverage_audit, exact_errors, fit_loglog_slope, gates, mean_std, ExactErrors, LinearEstimate, LogLogFit};
use crate::config::{EstimatorKind, ExperimentConfig, ExperimentKind, PolicyKind};
use crate::error::SimError;
use crate::scenario::OfflineDesign;
use crate::selftest::{self, Check};
use crate::verify::verify_update_statistics;

/// Mean and spread of one metric of one series at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: u64,
    pub series: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub replications: usize,
    pub points: Vec<GridPoint>,
    /// Keyed `series/metric`.
    pub slopes: BTreeMap<String, LogLogFit>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub gates: BTreeMap<String, bool>,
    pub notes: Vec<String>,
}

impl Summary {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            name: config.name.clone(),
            kind: config.kind,
            config_hash: config.hash(),
            seed: config.seed,
            replications: config.replications,
            points: Vec::new(),
            slopes: BTreeMap::new(),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            gates: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.gates.values().all(|g| *g)
    }

    pub fn slope(&self, series: &str, metric: &str) -> Option<f64> {
        self.slopes.get(&format!("{series}/{metric}")).map(|f| f.slope)
    }

    fn point(&mut self, x: u64, series: &str, metric: &str, values: &[f64]) {
        let ms = mean_std(values);
        self.points.push(GridPoint {
            x,
            series: series.into(),
            metric: metric.into(),
            mean: ms.mean,
            std: ms.std,
            count: values.len(),
        });
    }

    /// Fits the slope of the per-point means of `series/metric`. Series
    /// with a nonpositive mean get a note instead.
    fn fit(&mut self, series: &str, metric: &str) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .points
            .iter()
            .filter(|p| p.series == series && p.metric == metric)
            .map(|p| (p.x as f64, p.mean))
            .unzip();
        match fit_loglog_slope(&xs, &ys) {
            Ok(fit) => {
                self.slopes.insert(format!("{series}/{metric}"), fit);
                Some(fit.slope)
            }
            Err(e) => {
                self.notes.push(format!("no slope for {series}/{metric}: {e}"));
                None
            }
        }
    }
}

/// A file to write, relative to the experiment directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Summary,
    pub files: Vec<Artifact>,
}

/// Validates `config` and runs it on a pool of `threads` workers (all
/// cores when `None`).
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<Outcome, SimError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| SimError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match config.kind {
        ExperimentKind::MechanismSelftest => mechanism_selftest(config),
        ExperimentKind::MadCurve | ExperimentKind::MseLowerBound => offline_curve(config),
        ExperimentKind::CoverageAudit => coverage_experiment(config),
        ExperimentKind::RegretCurve => regret_curve(config),
    })
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out.into_bytes()
}

fn artifact(path: impl Into<PathBuf>, bytes: Vec<u8>) -> Artifact {
    Artifact {
        path: path.into(),
        bytes,
    }
}

fn tasks(grid: usize, reps: usize) -> Vec<(usize, usize)> {
    (0..grid).flat_map(|g| (0..reps).map(move |r| (g, r))).collect()
}

fn mechanism_selftest(config: &ExperimentConfig) -> Result<Outcome, SimError> {
    let mut summary = Summary::new(config);
    let (moments, certificates) = rayon::join(
        || selftest::moment_checks(config.seed, config.selftest.draws),
        selftest::certificate_checks,
    );
    let moments = moments?;
    let certificates = certificates?;
    summary.gates.insert("moments".into(), moments.iter().all(|c| c.pass));
    summary.gates.insert("certificates".into(), certificates.iter().all(|c| c.pass));
    summary.metrics.insert("moment_checks".into(), moments.len() as f64);
    summary.metrics.insert("certificate_checks".into(), certificates.len() as f64);
    summary.checks = moments.into_iter().chain(certificates).collect();
    let rows = summary.checks.iter().map(|c| {
        let z = c.z.map(|z| z.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", c.group, c.name, c.observed, c.expected, z, c.pass)
    });
    let file = artifact("checks.csv", csv("group,name,observed,expected,z,pass", rows));
    Ok(Outcome {
        summary,
        files: vec![file],
    })
}

type Samples = Vec<(DVector<f64>, f64)>;

fn draw_samples(law: &OfflineDesign, total: usize, key: StreamKey) -> Samples {
    let mut rng = key.rng();
    law.design.stream(&law.theta, law.noise, &mut rng).take(total).collect()
}

fn run_lplr(config: &ExperimentConfig, law: &OfflineDesign, n: usize, samples: &Samples, key: StreamKey) -> Result<LplrEstimate, SimError> {
    let d = law.design.dim();
    let oracle = OracleConfig::new(config.layer_params(d, config.oracle.horizon)?, n, config.noise())?;
    Ok(run_oracle(samples.iter().map(|(p, y)| Some((p, *y))), oracle, key.rng())?)
}

struct OfflineRow {
    n: u64,
    rep: usize,
    estimator: EstimatorKind,
    errors: ExactErrors,
}

fn offline_task(config: &ExperimentConfig, g: usize, rep: usize) -> Result<Vec<OfflineRow>, SimError> {
    let n = config.grid[g];
    let env = config.env.as_ref().expect("validated");
    let law = env.offline_design(n, config.privacy.alpha)?;
    let d = law.design.dim();
    let per_layer = n as usize;
    let run = rep as u64;
    let samples = draw_samples(&law, 2 * d * per_layer, StreamKey::new(config.seed, run, Channel::Environment).with_epoch(g as u64));
    let estimator_key = StreamKey::new(config.seed, run, Channel::Estimator).with_epoch(g as u64);
    let perturbed = if config.estimators.iter().any(|e| e.is_input_perturbation()) {
        let mut oracle = InputPerturbationOracle::new(d, config.privacy.alpha, config.noise(), estimator_key.with_oracle(1).rng())?;
        for (phi, y) in &samples {
            oracle.push(Some((phi, *y)))?;
        }
        Some(oracle)
    } else {
        None
    };
    // The perturbed Gram matrix carries noise of order sqrt(N), so the
    // ridge of the input-perturbation estimators grows at that rate.
    let input_reg = config.ridge.reg * (samples.len() as f64).sqrt();
    let mut rows = Vec::new();
    for &estimator in &config.estimators {
        let linear = |theta: DVector<f64>| exact_errors(&LinearEstimate(theta), &law.theta, &law.design);
        let errors = match estimator {
            EstimatorKind::Lplr => {
                let key = StreamKey::new(config.seed, run, Channel::OracleNoise).with_epoch(g as u64);
                let est = run_lplr(config, &law, per_layer, &samples, key)?;
                exact_errors(&est, &law.theta, &law.design)
            }
            EstimatorKind::InputRidge => {
                linear(perturbed.as_ref().expect("built above").fit(PerturbedEstimator::Ridge, input_reg)?)
            }
            EstimatorKind::InputBiasCorrected => {
                linear(perturbed.as_ref().expect("built above").fit(PerturbedEstimator::BiasCorrected, input_reg)?)
            }
            EstimatorKind::Suffstat => {
                let mut rng = estimator_key.with_oracle(2).rng();
                linear(suffstat_fit(&samples, d, config.budget(), config.noise(), config.ucb.reg, config.ucb.shift, &mut rng)?)
            }
            EstimatorKind::NonprivateRidge => linear(ridge_fit(&samples, d, config.ridge.reg)?),
        };
        rows.push(OfflineRow {
            n,
            rep,
            estimator,
            errors,
        });
    }
    Ok(rows)
}

fn offline_curve(config: &ExperimentConfig) -> Result<Outcome, SimError> {
    let rows: Vec<OfflineRow> = tasks(config.grid.len(), config.replications)
        .into_par_iter()
        .map(|(g, r)| offline_task(config, g, r))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut summary = Summary::new(config);
    let metric = match config.kind {
        ExperimentKind::MadCurve => "mad",
        _ => "mse",
    };
    for &estimator in &config.estimators {
        let label = estimator.label();
        for &n in &config.grid {
            let mine: Vec<&ExactErrors> = rows.iter().filter(|r| r.n == n && r.estimator == estimator).map(|r| &r.errors).collect();
            summary.point(n, label, "mad", &mine.iter().map(|e| e.mad).collect::<Vec<_>>());
            summary.point(n, label, "mse", &mine.iter().map(|e| e.mse).collect::<Vec<_>>());
            if estimator == EstimatorKind::Lplr {
                summary.point(n, label, "mean_width", &mine.iter().map(|e| e.mean_width).collect::<Vec<_>>());
            }
        }
    }
    let mut slopes = BTreeMap::new();
    for &estimator in &config.estimators {
        if let Some(s) = summary.fit(estimator.label(), metric) {
            slopes.insert(estimator, s);
        }
    }
    match config.kind {
        ExperimentKind::MadCurve => {
            if config.estimators.contains(&EstimatorKind::Lplr) {
                let pass = slopes.get(&EstimatorKind::Lplr).is_some_and(|s| gates::mad_slope(*s));
                summary.gates.insert("lplr_mad_slope".into(), pass);
            }
            // The better input-perturbation estimator is the one with the
            // lower mean MAD at the largest n.
            let last = *config.grid.last().expect("validated");
            let final_mad = |e: EstimatorKind| {
                summary
                    .points
                    .iter()
                    .find(|p| p.x == last && p.series == e.label() && p.metric == "mad")
                    .map_or(f64::INFINITY, |p| p.mean)
            };
            let better = config
                .estimators
                .iter()
                .copied()
                .filter(|e| e.is_input_perturbation())
                .min_by(|a, b| final_mad(*a).total_cmp(&final_mad(*b)));
            if let Some(better) = better {
                summary.notes.push(format!("better input-perturbation estimator: {}", better.label()));
                let slope = slopes.get(&better).copied();
                if let Some(s) = slope {
                    summary.metrics.insert("best_input_slope".into(), s);
                }
                let floor = slope.is_some_and(|s| s >= gates::INPUT_FLOOR_SLOPE);
                summary.gates.insert("input_floor_slope".into(), floor);
                if let (Some(s), Some(l)) = (slope, slopes.get(&EstimatorKind::Lplr)) {
                    summary.gates.insert("input_floor_margin".into(), gates::input_floor(s, *l));
                }
            }
        }
        _ => {
            let private: Vec<_> = config.estimators.iter().filter(|e| e.is_private()).collect();
            let mut all = !private.is_empty();
            for e in private {
                let pass = slopes.get(e).is_some_and(|s| gates::mse_floor(*s));
                summary.gates.insert(format!("mse_floor_{}", e.label()), pass);
                all &= pass;
            }
            summary.gates.insert("mse_floor".into(), all);
        }
    }
    let lines = rows.iter().map(|r| {
        let e = &r.errors;
        format!("{},{},{},{},{},{},{}", r.n, r.rep, r.estimator.label(), e.mad, e.mse, e.mean_width, e.covered)
    });
    let file = artifact("results.csv", csv("n,replication,estimator,mad,mse,mean_width,covered", lines));
    Ok(Outcome {
        summary,
        files: vec![file],
    })
}

struct CoverageRow {
    n: u64,
    rep: usize,
    errors: ExactErrors,
    covered: bool,
    max_violation: f64,
    verified: Option<(bool, bool)>,
    bins: String,
}

fn coverage_task(config: &ExperimentConfig, g: usize, rep: usize) -> Result<CoverageRow, SimError> {
    let n = config.grid[g];
    let env = config.env.as_ref().expect("validated");
    let law = env.offline_design(n, config.privacy.alpha)?;
    let d = law.design.dim();
    let per_layer = n as usize;
    let run = rep as u64;
    let samples = draw_samples(&law, 2 * d * per_layer, StreamKey::new(config.seed, run, Channel::Environment).with_epoch(g as u64));
    let est = run_lplr(config, &law, per_layer, &samples, StreamKey::new(config.seed, run, Channel::OracleNoise).with_epoch(g as u64))?;
    let mut grid: Vec<DVector<f64>> = law.design.atoms().to_vec();
    grid.push(DVector::zeros(d));
    let audit = coverage_audit(&[&est as &dyn Estimate], &law.theta, &grid);
    let mut bins = String::new();
    let verified = match law.noise {
        RewardNoise::Uniform { .. } => None,
        _ => {
            let report = verify_update_statistics(&est, per_layer, &law)?;
            for b in &report.bins {
                let addr: Vec<String> = b.address.iter().map(|k| k.to_string()).collect();
                let pair = |p: Option<(f64, f64)>| p.map(|(e, b)| format!("{e},{b}")).unwrap_or_else(|| ",".into());
                let _ = writeln!(
                    bins,
                    "{n},{rep},{},{},{},{},{},{},{},{}",
                    b.layer,
                    addr.join("-"),
                    b.mass,
                    b.mass_error,
                    b.mass_bound,
                    pair(b.cross),
                    pair(b.second),
                    b.holds
                );
            }
            Some((report.holds, report.eigen_floor_holds))
        }
    };
    Ok(CoverageRow {
        n,
        rep,
        errors: exact_errors(&est, &law.theta, &law.design),
        covered: audit.rate == 1.0,
        max_violation: audit.max_violation[0],
        verified,
        bins,
    })
}

/// Per-replication counts from a full elimination run.
#[derive(Debug, Clone, Default)]
struct PolicyCounts {
    ci_valid: bool,
    retention: u64,
    nesting: u64,
    suboptimality: u64,
    eliminating_periods: u64,
    final_regret: f64,
}

/// Whether every finished table covers the truth on every context.
fn tables_valid(policy: &EliminationPolicy, env: &LinearEnv) -> bool {
    policy.tables().iter().all(|table| {
        (0..env.contexts()).all(|x| {
            env.features(x).iter().zip(table).all(|(phi, est)| {
                let p = est.predict(phi);
                (p.value - env.mean_reward(phi)).abs() <= p.width
            })
        })
    })
}

fn audit_period(view: &PeriodView<'_>, policy: &EliminationPolicy, env: &LinearEnv, counts: &mut PolicyCounts) {
    let means: Vec<f64> = view.features.iter().map(|phi| env.mean_reward(phi)).collect();
    let best = env.optimal_value(view.context);
    let chain = policy.chain(view.features);
    let mut previous: Vec<usize> = (0..view.features.len()).collect();
    for (level, active) in chain.iter().enumerate() {
        if active.iter().any(|a| !previous.contains(a)) {
            counts.nesting += 1;
        }
        if !active.iter().any(|&a| means[a] >= best - 1e-12) {
            counts.retention += 1;
        }
        let table = &policy.tables()[level];
        let spread: f64 = active.iter().map(|&a| table[a].predict(&view.features[a]).width).sum();
        if active.iter().any(|&a| best - means[a] > 2.0 * spread + 1e-12) {
            counts.suboptimality += 1;
        }
        previous = active.clone();
    }
    if view.decision.active_set_size < view.features.len() {
        counts.eliminating_periods += 1;
    }
}

fn lplr_policy(config: &ExperimentConfig, env: &LinearEnv, horizon: u64, rep: usize) -> Result<EliminationPolicy, SimError> {
    let d = env.dim();
    let factory = LplrFactory {
        dim: d,
        horizon,
        beta: config.oracle.beta,
        budget: config.budget(),
        delta: config.oracle.delta,
        kappas: config.kappas(d),
        strict_constants: config.oracle.strict_constants,
        noise: config.noise(),
    };
    let schedule = EpochSchedule::standard(d, horizon, config.oracle.beta)?;
    let key = StreamKey::new(config.seed, rep as u64, Channel::OracleNoise);
    Ok(EliminationPolicy::new(env.actions(), Box::new(factory), schedule, key)?)
}

fn policy_audit_task(config: &ExperimentConfig, env: &LinearEnv, horizon: u64, rep: usize) -> Result<PolicyCounts, SimError> {
    let mut policy = lplr_policy(config, env, horizon, rep)?;
    let run = rep as u64;
    let mut env_rng = StreamKey::new(config.seed, run, Channel::Environment).with_oracle(1).rng();
    let mut policy_rng = StreamKey::new(config.seed, run, Channel::Policy).with_oracle(1).rng();
    let mut counts = PolicyCounts::default();
    let trace = simulate(env, &mut policy, horizon, &mut env_rng, &mut policy_rng, horizon, |view, p| {
        audit_period(view, p, env, &mut counts)
    })?;
    counts.ci_valid = tables_valid(&policy, env);
    counts.final_regret = trace.final_regret;
    Ok(counts)
}

fn coverage_experiment(config: &ExperimentConfig) -> Result<Outcome, SimError> {
    let rows: Vec<CoverageRow> = tasks(config.grid.len(), config.replications)
        .into_par_iter()
        .map(|(g, r)| coverage_task(config, g, r))
        .collect::<Result<_, _>>()?;
    let mut summary = Summary::new(config);
    let mut coverage_ok = true;
    let mut verification_ok = true;
    let mut eigen_ok = true;
    for &n in &config.grid {
        let mine: Vec<&CoverageRow> = rows.iter().filter(|r| r.n == n).collect();
        let covered: Vec<f64> = mine.iter().map(|r| r.covered as u8 as f64).collect();
        summary.point(n, "lplr", "covered", &covered);
        summary.point(n, "lplr", "max_violation", &mine.iter().map(|r| r.max_violation).collect::<Vec<_>>());
        summary.point(n, "lplr", "mean_width", &mine.iter().map(|r| r.errors.mean_width).collect::<Vec<_>>());
        summary.point(n, "lplr", "mad", &mine.iter().map(|r| r.errors.mad).collect::<Vec<_>>());
        let rate = mean_std(&covered).mean;
        summary.metrics.insert(format!("coverage_rate_n{n}"), rate);
        coverage_ok &= gates::coverage(rate);
        let verified: Vec<(bool, bool)> = mine.iter().filter_map(|r| r.verified).collect();
        if !verified.is_empty() {
            let held = verified.iter().filter(|v| v.0).count();
            let floor = gates::high_probability_floor(config.oracle.delta, verified.len());
            summary.metrics.insert(format!("verification_held_n{n}"), held as f64);
            summary.metrics.insert(format!("verification_floor_n{n}"), floor);
            verification_ok &= held as f64 >= floor;
            let eigen_held = verified.iter().filter(|v| v.0 && v.1).count();
            summary.metrics.insert(format!("eigen_floor_held_n{n}"), eigen_held as f64);
            eigen_ok &= eigen_held == held;
        }
    }
    summary.gates.insert("coverage".into(), coverage_ok);
    if rows.iter().any(|r| r.verified.is_some()) {
        summary.gates.insert("update_concentration".into(), verification_ok);
        // The eigenvalue floor is proved for the minimum constants; under the
        // desk preset it is reported only.
        if config.oracle.strict_constants {
            summary.gates.insert("eigenvalue_floor".into(), eigen_ok);
        } else {
            summary.metrics.insert("eigenvalue_floor_held".into(), eigen_ok as u8 as f64);
        }
    } else {
        summary.notes.push("update statistics not verified: exact conditionals need noiseless or Bernoulli rewards".into());
    }

    let mut files = vec![
        artifact(
            "coverage.csv",
            csv(
                "n,replication,covered,max_violation,mean_width,mad,verified,eigen_floor",
                rows.iter().map(|r| {
                    let (v, e) = r.verified.map(|(v, e)| (v.to_string(), e.to_string())).unwrap_or_default();
                    format!("{},{},{},{},{},{},{v},{e}", r.n, r.rep, r.covered, r.max_violation, r.errors.mean_width, r.errors.mad)
                }),
            ),
        ),
        artifact(
            "verification.csv",
            csv(
                "n,replication,layer,address,mass,mass_error,mass_bound,cross_error,cross_bound,second_error,second_bound,holds",
                rows.iter().filter(|r| !r.bins.is_empty()).map(|r| r.bins.trim_end().to_string()),
            ),
        ),
    ];

    if let Some(audit) = config.policy_audit {
        let env = config.env.as_ref().expect("validated").bandit_env()?;
        let counts: Vec<PolicyCounts> = (0..config.replications)
            .into_par_iter()
            .map(|r| policy_audit_task(config, &env, audit.horizon, r))
            .collect::<Result<_, _>>()?;
        let valid: Vec<&PolicyCounts> = counts.iter().filter(|c| c.ci_valid).collect();
        let sum = |f: fn(&PolicyCounts) -> u64, set: &[&PolicyCounts]| set.iter().map(|c| f(c)).sum::<u64>();
        let all: Vec<&PolicyCounts> = counts.iter().collect();
        let m = &mut summary.metrics;
        m.insert("policy_ci_valid_runs".into(), valid.len() as f64);
        m.insert("policy_retention_violations".into(), sum(|c| c.retention, &valid) as f64);
        m.insert("policy_suboptimality_violations".into(), sum(|c| c.suboptimality, &valid) as f64);
        m.insert("policy_nesting_violations".into(), sum(|c| c.nesting, &all) as f64);
        m.insert("policy_retention_violations_all_runs".into(), sum(|c| c.retention, &all) as f64);
        m.insert("policy_eliminating_periods".into(), sum(|c| c.eliminating_periods, &all) as f64);
        let clean = sum(|c| c.retention + c.suboptimality, &valid) == 0 && sum(|c| c.nesting, &all) == 0;
        summary.gates.insert("elimination_invariants".into(), clean);
        files.push(artifact(
            "policy_audit.csv",
            csv(
                "replication,ci_valid,retention_violations,nesting_violations,suboptimality_violations,eliminating_periods,final_regret",
                counts.iter().enumerate().map(|(r, c)| {
                    format!(
                        "{r},{},{},{},{},{},{}",
                        c.ci_valid, c.retention, c.nesting, c.suboptimality, c.eliminating_periods, c.final_regret
                    )
                }),
            ),
        ));
    }
    Ok(Outcome { summary, files })
}

struct RegretRun {
    horizon: u64,
    rep: usize,
    policy: PolicyKind,
    trace: RegretTrace,
    ci_valid: Option<bool>,
}

fn regret_task(config: &ExperimentConfig, env: &LinearEnv, g: usize, rep: usize, kind: PolicyKind) -> Result<RegretRun, SimError> {
    let horizon = config.grid[g];
    let run = rep as u64;
    let d = env.dim();
    let mut env_rng = StreamKey::new(config.seed, run, Channel::Environment).rng();
    let mut policy_rng = StreamKey::new(config.seed, run, Channel::Policy).rng();
    let stride = config.trace_stride;
    let schedule = EpochSchedule::standard(d, horizon, config.oracle.beta)?;
    let noise_key = StreamKey::new(config.seed, run, Channel::OracleNoise);
    let mut elimination = |mut policy: EliminationPolicy| -> Result<(RegretTrace, Option<bool>), SimError> {
        let trace = simulate(env, &mut policy, horizon, &mut env_rng, &mut policy_rng, stride, |_, _| {})?;
        let valid = tables_valid(&policy, env);
        Ok((trace, Some(valid)))
    };
    let (trace, ci_valid) = match kind {
        PolicyKind::LplrElimination => elimination(lplr_policy(config, env, horizon, rep)?)?,
        PolicyKind::NonprivateRidgeElim => {
            let factory = RidgeFactory {
                dim: d,
                reg: config.ridge.reg,
                width_scale: config.ridge.width_scale,
            };
            elimination(EliminationPolicy::new(env.actions(), Box::new(factory), schedule, noise_key)?)?
        }
        PolicyKind::InjectedTruth => elimination(injected_truth_policy(env.theta(), env.actions(), schedule, noise_key)?)?,
        PolicyKind::SuffstatUcb => {
            let mut policy = SuffstatUcb::new(d, config.budget(), config.noise(), config.ucb, noise_key.rng());
            let trace = simulate(env, &mut policy, horizon, &mut env_rng, &mut policy_rng, stride, |_, _| {})?;
            (trace, None)
        }
    };
    Ok(RegretRun {
        horizon,
        rep,
        policy: kind,
        trace,
        ci_valid,
    })
}

fn regret_curve(config: &ExperimentConfig) -> Result<Outcome, SimError> {
    let env = config.env.as_ref().expect("validated").bandit_env()?;
    let jobs: Vec<(usize, usize, PolicyKind)> = tasks(config.grid.len(), config.replications)
        .into_iter()
        .flat_map(|(g, r)| config.policies.iter().map(move |&p| (g, r, p)))
        .collect();
    let runs: Vec<RegretRun> = jobs
        .into_par_iter()
        .map(|(g, r, p)| regret_task(config, &env, g, r, p))
        .collect::<Result<_, _>>()?;
    let mut summary = Summary::new(config);
    let mut files = Vec::new();
    for run in &runs {
        let rows = run.trace.rows.iter().map(|row| format!("{},{},{},{}", row.t, row.cum_regret, row.active_set_size, row.epoch));
        files.push(artifact(
            format!("traces/{}/T{}_r{:03}.csv", run.policy.label(), run.horizon, run.rep),
            csv("t,cum_regret,active_set_size,epoch", rows),
        ));
    }
    files.push(artifact(
        "regret.csv",
        csv(
            "horizon,replication,policy,final_regret,ci_valid,clamped_rewards",
            runs.iter().map(|r| {
                let valid = r.ci_valid.map(|v| v.to_string()).unwrap_or_default();
                format!("{},{},{},{},{valid},{}", r.horizon, r.rep, r.policy.label(), r.trace.final_regret, r.trace.clamped_rewards)
            }),
        ),
    ));
    for &policy in &config.policies {
        let label = policy.label();
        for &t in &config.grid {
            let mine: Vec<&RegretRun> = runs.iter().filter(|r| r.horizon == t && r.policy == policy).collect();
            summary.point(t, label, "final_regret", &mine.iter().map(|r| r.trace.final_regret).collect::<Vec<_>>());
            let valid: Vec<f64> = mine.iter().filter_map(|r| r.ci_valid).map(|v| v as u8 as f64).collect();
            if !valid.is_empty() {
                summary.point(t, label, "ci_valid", &valid);
            }
        }
        if policy != PolicyKind::InjectedTruth {
            summary.fit(label, "final_regret");
        }
    }
    let lplr = summary.slope(PolicyKind::LplrElimination.label(), "final_regret");
    let ucb = summary.slope(PolicyKind::SuffstatUcb.label(), "final_regret");
    if let Some(l) = lplr {
        summary.gates.insert("lplr_regret_slope".into(), l <= gates::REGRET_SLOPE);
    }
    if config.policies.contains(&PolicyKind::LplrElimination) && config.policies.contains(&PolicyKind::SuffstatUcb) {
        let pass = matches!((lplr, ucb), (Some(l), Some(u)) if gates::regret_separation(l, u));
        summary.gates.insert("regret_separation".into(), pass);
    }
    if let Some(u) = ucb {
        summary.notes.push(format!(
            "suffstat_ucb is an illustrative baseline; its slope {u:.3} is reported, not gated"
        ));
    }
    if config.policies.contains(&PolicyKind::InjectedTruth) {
        let zero = runs
            .iter()
            .filter(|r| r.policy == PolicyKind::InjectedTruth)
            .all(|r| r.trace.final_regret == 0.0);
        summary.gates.insert("injected_truth_zero_regret".into(), zero);
    }
    let monotone = runs
        .iter()
        .all(|r| r.trace.rows.windows(2).all(|w| w[1].t > w[0].t && w[1].cum_regret >= w[0].cum_regret));
    summary.gates.insert("traces_monotone".into(), monotone);
    Ok(Outcome { summary, files })
}
