//! Moment checks of the noise samplers and the privacy certificate sweep.

use lplr_core::lplr::{run_oracle, OracleConfig};
use lplr_core::mechanisms::{
    centered_wishart_noise, confidence_channel_certificate, sample_laplace, sample_wishart,
    update_channel_certificates, NoiseMode, PrivacyBudget,
};
use lplr_core::partition::{Kappas, LayerParams};
use lplr_core::rng::{Channel, StreamKey, StreamRng};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::mean_std;
use crate::error::SimError;

/// Moment checks pass when `|z| <= Z_LIMIT`.
pub const Z_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub group: String,
    pub observed: f64,
    pub expected: f64,
    /// Standardized deviation, for Monte Carlo checks.
    pub z: Option<f64>,
    pub pass: bool,
}

impl Check {
    fn z(group: &str, name: String, observed: f64, expected: f64, std_err: f64) -> Self {
        let z = (observed - expected) / std_err;
        Self {
            name,
            group: group.into(),
            observed,
            expected,
            z: Some(z),
            pass: z.abs() <= Z_LIMIT,
        }
    }

    fn at_most(group: &str, name: String, observed: f64, limit: f64) -> Self {
        Self {
            name,
            group: group.into(),
            observed,
            expected: limit,
            z: None,
            pass: observed <= limit,
        }
    }
}

fn rng(seed: u64, run: u64) -> StreamRng {
    StreamKey::new(seed, run, Channel::Selftest).rng()
}

/// `sample mean`, and the sample variance with its standard error from the
/// fourth central moment.
struct Moments {
    mean: f64,
    var: f64,
    var_se: f64,
}

fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let ms = mean_std(xs);
    let m4 = xs.iter().map(|x| (x - ms.mean).powi(4)).sum::<f64>() / n;
    let var = ms.std * ms.std;
    Moments {
        mean: ms.mean,
        var,
        var_se: ((m4 - var * var) / n).max(0.0).sqrt(),
    }
}

fn laplace_checks(seed: u64, draws: usize, out: &mut Vec<Check>) -> Result<(), SimError> {
    for (i, b) in [0.5, 1.0, 3.0, 12.0].into_iter().enumerate() {
        let mut r = rng(seed, 10 + i as u64);
        let xs: Vec<f64> = (0..draws)
            .map(|_| sample_laplace(1, b, &mut r).map(|v| v[0]))
            .collect::<Result<_, _>>()?;
        let n = draws as f64;
        let m = moments(&xs);
        let var = 2.0 * b * b;
        out.push(Check::z("laplace", format!("laplace b={b} mean"), m.mean, 0.0, (var / n).sqrt()));
        // E X^4 = 24 b^4, so Var(X^2) = 20 b^4.
        let second = xs.iter().map(|x| x * x).sum::<f64>() / n;
        out.push(Check::z(
            "laplace",
            format!("laplace b={b} second moment"),
            second,
            var,
            (20.0 * b.powi(4) / n).sqrt(),
        ));
        // P(|X| > 3b) = e^{-3}.
        let tail = xs.iter().filter(|x| x.abs() > 3.0 * b).count() as f64 / n;
        let p = (-3.0f64).exp();
        out.push(Check::z("laplace", format!("laplace b={b} tail"), tail, p, (p * (1.0 - p) / n).sqrt()));
    }
    Ok(())
}

fn wishart_checks(seed: u64, draws: usize, out: &mut Vec<Check>) -> Result<(), SimError> {
    let scales = [
        DMatrix::from_diagonal_element(2, 2, 1.5),
        DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 1.0]),
        DMatrix::from_diagonal_element(3, 3, 0.75),
    ];
    for (i, sigma) in scales.iter().enumerate() {
        let d = sigma.nrows();
        let m = d + 1;
        let mf = m as f64;
        let mut r = rng(seed, 20 + i as u64);
        let samples: Vec<DMatrix<f64>> = (0..draws)
            .map(|_| sample_wishart(d, m, sigma, &mut r))
            .collect::<Result<_, _>>()?;
        let n = draws as f64;
        for a in 0..d {
            for b in a..d {
                let xs: Vec<f64> = samples.iter().map(|w| w[(a, b)]).collect();
                let mo = moments(&xs);
                let mean = mf * sigma[(a, b)];
                let var = mf * (sigma[(a, b)].powi(2) + sigma[(a, a)] * sigma[(b, b)]);
                out.push(Check::z(
                    "wishart",
                    format!("wishart #{i} ({a},{b}) mean"),
                    mo.mean,
                    mean,
                    (var / n).sqrt(),
                ));
                out.push(Check::z("wishart", format!("wishart #{i} ({a},{b}) variance"), mo.var, var, mo.var_se));
            }
        }
    }
    // Centered noise: the mean of N draws has Frobenius norm at most
    // Z_LIMIT times its own standard deviation, which bounds the operator norm.
    for (i, (d, alpha, magnitude)) in [(2usize, 1.0, 1.0), (3, 0.5, 0.2)].into_iter().enumerate() {
        let budget = PrivacyBudget::new(alpha)?;
        let mut r = rng(seed, 30 + i as u64);
        let mut sum = DMatrix::zeros(d, d);
        for _ in 0..draws {
            sum += centered_wishart_noise(d, budget, magnitude, &mut r)?;
        }
        let mean = sum / draws as f64;
        let s2 = budget.wishart_variance();
        let m = (d + 1) as f64;
        let entry_var: f64 = (0..d)
            .flat_map(|a| (0..d).map(move |b| if a == b { 2.0 * m * s2 * s2 } else { m * s2 * s2 }))
            .sum();
        let threshold = Z_LIMIT * magnitude * (entry_var / draws as f64).sqrt();
        let op = mean.clone().symmetric_eigenvalues().amax();
        out.push(Check::at_most(
            "wishart",
            format!("centered wishart d={d} alpha={alpha} mean operator norm"),
            op,
            threshold,
        ));
    }
    Ok(())
}

/// All-dummy oracle at `n = 10^4` per layer: each layer-1 mass is a sum of
/// `n` Laplace(3/alpha) draws over `n`, so its sd is `3 sqrt(2/n) / alpha`.
fn dummy_count_checks(seed: u64, out: &mut Vec<Check>) -> Result<(), SimError> {
    let n = 10_000;
    let params = LayerParams::new(2, 1024, 0.1, PrivacyBudget::new(1.0)?, 0.05, Kappas::desk_scale(), false)?;
    let mut masses = Vec::new();
    for run in 0..60 {
        let config = OracleConfig::new(params.clone(), n, NoiseMode::Private)?;
        let est = run_oracle(core::iter::repeat_n(None, config.total_samples()), config, rng(seed, 100 + run))?;
        masses.extend(est.tree().layer_bins(1).iter().map(|b| b.mass));
    }
    let sd = 3.0 * (2.0 / n as f64).sqrt();
    let mo = moments(&masses);
    out.push(Check::z("dummy", "dummy-only mass mean".into(), mo.mean, 0.0, sd / (masses.len() as f64).sqrt()));
    out.push(Check::z("dummy", "dummy-only mass variance".into(), mo.var, sd * sd, mo.var_se));
    let band = 2.576 * sd;
    let r = masses.len() as f64;
    let inside = masses.iter().filter(|m| m.abs() <= band).count() as f64 / r;
    out.push(Check::z("dummy", "dummy-only mass inside 99% band".into(), inside, 0.99, (0.99 * 0.01 / r).sqrt()));
    Ok(())
}

/// Every Laplace channel the oracle can emit, over a sweep of dimension,
/// `gamma`, shell and budget, must meet its share exactly.
pub fn certificate_checks() -> Result<Vec<Check>, SimError> {
    let mut out = Vec::new();
    for d in [1usize, 2, 3, 5] {
        for alpha in [0.1, 0.5, 1.0] {
            let budget = PrivacyBudget::new(alpha)?;
            for (horizon, beta) in [(1u64 << 10, 0.1), (1 << 14, 0.1), (1 << 18, 0.25)] {
                let params = LayerParams::new(d, horizon, beta, budget, 0.05, Kappas::desk_scale(), false)?;
                let g = params.gamma();
                for k in 0..=params.levels() {
                    let radius = params.radius(k);
                    let tag = format!("d={d} alpha={alpha} gamma={g:.4} k={k}");
                    for cert in update_channel_certificates(d, budget, radius) {
                        let c = cert.certificate;
                        let exact = (c.log_ratio - alpha / 3.0).abs() <= 1e-12 * alpha;
                        out.push(Check {
                            name: format!("{} {tag}", cert.channel),
                            group: "certificate".into(),
                            observed: c.log_ratio,
                            expected: alpha / 3.0,
                            z: None,
                            pass: c.within_budget && exact,
                        });
                    }
                    let floor = g.powi(-2 * k as i32 - 2) / (2.0 * d as f64);
                    for eigenvalue in [floor, radius * radius / d as f64, radius * radius] {
                        let c = confidence_channel_certificate(budget, eigenvalue, radius).certificate;
                        let exact = (c.log_ratio - alpha).abs() <= 1e-12 * alpha;
                        out.push(Check {
                            name: format!("confidence s={eigenvalue:.3e} {tag}"),
                            group: "certificate".into(),
                            observed: c.log_ratio,
                            expected: alpha,
                            z: None,
                            pass: c.within_budget && exact,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Moment checks at `draws` samples each.
pub fn moment_checks(seed: u64, draws: usize) -> Result<Vec<Check>, SimError> {
    let mut out = Vec::new();
    laplace_checks(seed, draws, &mut out)?;
    wishart_checks(seed, draws, &mut out)?;
    dummy_count_checks(seed, &mut out)?;
    Ok(out)
}
