//! Slope fits, MAD estimates, coverage audits and the acceptance gates.
//!
//! Every gate threshold lives here so that the runner, the CLI and the
//! acceptance suite agree on them.

use lplr_core::environments::DiscreteDesign;
use lplr_core::oracle::{Estimate, Prediction};
use lplr_core::rng::StreamRng;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `ln y` on `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<LogLogFit, SimError> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(SimError::Config("slope fit needs at least 4 paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(SimError::Config("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(SimError::Config("slope fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt() }
}

/// Linear predictor `phi^T theta` with zero width.
pub struct LinearEstimate(pub DVector<f64>);

impl Estimate for LinearEstimate {
    fn predict(&self, phi: &DVector<f64>) -> Prediction {
        Prediction {
            value: phi.dot(&self.0),
            width: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadEstimate {
    pub mad: f64,
    pub std_err: f64,
}

/// Monte Carlo `E|f(phi) - phi^T theta*|` over `draws` fresh features.
pub fn estimate_mad(
    est: &dyn Estimate,
    theta_star: &DVector<f64>,
    design: &DiscreteDesign,
    draws: usize,
    rng: &mut StreamRng,
) -> Result<MadEstimate, SimError> {
    if draws < 10_000 {
        return Err(SimError::Config("estimate_mad needs at least 10^4 draws".into()));
    }
    let errs: Vec<f64> = (0..draws)
        .map(|_| {
            let phi = design.sample(rng);
            (est.predict(phi).value - phi.dot(theta_star)).abs()
        })
        .collect();
    let ms = mean_std(&errs);
    Ok(MadEstimate {
        mad: ms.mean,
        std_err: ms.std / (draws as f64).sqrt(),
    })
}

/// Error moments of one estimate, exact over a finite design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactErrors {
    /// `E|f - f*|`.
    pub mad: f64,
    /// `E (f - f*)^2`, the directional squared error.
    pub mse: f64,
    /// `E Delta`.
    pub mean_width: f64,
    /// Whether `|f - f*| <= Delta` on every atom.
    pub covered: bool,
    /// Largest `(|f - f*| - Delta)_+` over the atoms.
    pub max_violation: f64,
}

pub fn exact_errors(est: &dyn Estimate, theta_star: &DVector<f64>, design: &DiscreteDesign) -> ExactErrors {
    let mut out = ExactErrors {
        mad: 0.0,
        mse: 0.0,
        mean_width: 0.0,
        covered: true,
        max_violation: 0.0,
    };
    for (phi, p) in design.atoms().iter().zip(design.probs()) {
        let pred = est.predict(phi);
        let err = (pred.value - phi.dot(theta_star)).abs();
        out.mad += p * err;
        out.mse += p * err * err;
        out.mean_width += p * pred.width;
        let excess = err - pred.width;
        if excess > 0.0 {
            out.covered = false;
            out.max_violation = out.max_violation.max(excess);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of runs whose interval holds on the entire grid.
    pub rate: f64,
    /// Per run, the largest `(|f - f*| - Delta)_+` over the grid.
    pub max_violation: Vec<f64>,
}

/// Simultaneous coverage of finished oracles on a grid of features.
pub fn coverage_audit(runs: &[&dyn Estimate], theta_star: &DVector<f64>, grid: &[DVector<f64>]) -> CoverageReport {
    let max_violation: Vec<f64> = runs
        .iter()
        .map(|est| {
            grid.iter()
                .map(|phi| {
                    let p = est.predict(phi);
                    ((p.value - phi.dot(theta_star)).abs() - p.width).max(0.0)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let held = max_violation.iter().filter(|v| **v == 0.0).count();
    CoverageReport {
        rate: held as f64 / runs.len().max(1) as f64,
        max_violation,
    }
}

/// Acceptance thresholds.
pub mod gates {
    /// LPLR MAD slope against `n`.
    pub const MAD_SLOPE: (f64, f64) = (-0.65, -0.35);
    /// Best input-perturbation MAD slope must stay at or above this.
    pub const INPUT_FLOOR_SLOPE: f64 = -0.42;
    /// ...and above the LPLR slope by at least this much.
    pub const INPUT_FLOOR_MARGIN: f64 = 0.08;
    /// Every private estimator's directional MSE slope stays at or above this.
    pub const MSE_FLOOR_SLOPE: f64 = -0.65;
    pub const COVERAGE_RATE: f64 = 0.90;
    pub const REGRET_SLOPE: f64 = 0.75;
    pub const REGRET_MARGIN: f64 = 0.05;

    pub fn mad_slope(slope: f64) -> bool {
        (MAD_SLOPE.0..=MAD_SLOPE.1).contains(&slope)
    }

    pub fn input_floor(best_input_slope: f64, lplr_slope: f64) -> bool {
        best_input_slope >= INPUT_FLOOR_SLOPE && best_input_slope - lplr_slope >= INPUT_FLOOR_MARGIN
    }

    pub fn mse_floor(slope: f64) -> bool {
        slope >= MSE_FLOOR_SLOPE
    }

    pub fn coverage(rate: f64) -> bool {
        rate >= COVERAGE_RATE
    }

    pub fn regret_separation(lplr_slope: f64, suffstat_slope: f64) -> bool {
        lplr_slope <= REGRET_SLOPE && suffstat_slope - lplr_slope >= REGRET_MARGIN
    }

    /// Replications in which a `1 - delta` event must hold out of `runs`.
    pub fn high_probability_floor(delta: f64, runs: usize) -> f64 {
        let r = runs as f64;
        (1.0 - delta) * r - 3.0 * (delta * r).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lplr_core::environments::{HardDesign, HardDesignKind};
    use lplr_core::rng::{Channel, StreamKey};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn slope_examples() {
        let xs: Vec<f64> = (10..=16).map(|e| 2f64.powi(e)).collect();
        let fit = fit_loglog_slope(&xs, &xs).unwrap();
        assert!((fit.slope - 1.0).abs() <= 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x.sqrt()).collect();
        assert!((fit_loglog_slope(&xs, &ys).unwrap().slope + 0.5).abs() <= 1e-12);
        let mut rng = StreamKey::new(4, 0, Channel::Audit).rng();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 2.0 * x.powf(0.75) * (1.0 + rng.random_range(-0.01..0.01)))
            .collect();
        let s = fit_loglog_slope(&xs, &ys).unwrap().slope;
        assert!((0.73..=0.77).contains(&s), "{s}");
        assert!(fit_loglog_slope(&xs, &vec![0.0; xs.len()]).is_err());
        assert!(fit_loglog_slope(&xs[..3], &xs[..3]).is_err());
    }

    #[test]
    fn mad_examples() {
        let theta = DVector::from_vec(vec![0.3, -0.2]);
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let design = DiscreteDesign::new(vec![v.clone(), -&v], vec![0.5, 0.5]).unwrap();
        let mut rng = StreamKey::new(5, 0, Channel::Audit).rng();
        let exact = LinearEstimate(theta.clone());
        assert_eq!(estimate_mad(&exact, &theta, &design, 10_000, &mut rng).unwrap().mad, 0.0);
        // Two-point design: |v^T w| on either atom.
        let w = DVector::from_vec(vec![0.1, 0.05]);
        let off = LinearEstimate(&theta + &w);
        let m = estimate_mad(&off, &theta, &design, 10_000, &mut rng).unwrap();
        assert!((m.mad - v.dot(&w).abs()).abs() < 1e-12);
        assert!(exact_errors(&off, &theta, &design).mad - v.dot(&w).abs() < 1e-15);
        assert!(estimate_mad(&off, &theta, &design, 100, &mut rng).is_err());

        // Rare-direction design: an error of e_2 costs c / sqrt(n) on average.
        let hard = HardDesign::new(HardDesignKind::MseFloor, 10_000, 1.0).unwrap();
        let d = hard.design();
        let target = hard.constant() / 100.0;
        let zero = DVector::zeros(2);
        let e2 = LinearEstimate(DVector::from_vec(vec![0.0, 1.0]));
        let m = estimate_mad(&e2, &zero, &d, 1_000_000, &mut rng).unwrap();
        assert!((m.mad - target).abs() <= 3.0 * m.std_err, "{m:?} vs {target}");
    }

    #[test]
    fn coverage_examples() {
        let theta = DVector::from_vec(vec![0.5, 0.0]);
        let grid = vec![DVector::zeros(2), DVector::from_vec(vec![1.0, 0.0])];
        let wide = lplr_core::oracle::ConstantEstimate::uninformed();
        let narrow = LinearEstimate(DVector::zeros(2));
        let runs: Vec<&dyn Estimate> = vec![&wide, &narrow];
        let rep = coverage_audit(&runs, &theta, &grid);
        assert_eq!(rep.rate, 0.5);
        assert_eq!(rep.max_violation, vec![0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn power_laws_recover_their_exponent(exp in -2.0f64..2.0, scale in 0.01f64..100.0) {
            let xs: Vec<f64> = (0..6).map(|i| 10f64.powi(i)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| scale * x.powf(exp)).collect();
            let fit = fit_loglog_slope(&xs, &ys).unwrap();
            prop_assert!((fit.slope - exp).abs() < 1e-9);
            prop_assert!((fit.intercept - scale.ln()).abs() < 1e-9);
        }
    }
}
