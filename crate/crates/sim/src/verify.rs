//! Concentration checks of the per-bin statistics against exact conditional
//! quantities.
//!
//! The conditional mass, cross moment and second moment of every bin are
//! computed by routing each atom of a finite design, and each possible
//! reward, through the finished tree. Layers above `h` are frozen once layer
//! `h` starts, so the finished tree reproduces the routing the layer-`h`
//! statistics saw.

use lplr_core::environments::RewardNoise;
use lplr_core::lplr::LplrEstimate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::scenario::OfflineDesign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCheck {
    pub layer: usize,
    pub address: Vec<usize>,
    pub mass: f64,
    pub mass_error: f64,
    pub mass_bound: f64,
    /// `(error, bound)` when the bin meets the size conditions.
    pub cross: Option<(f64, f64)>,
    pub second: Option<(f64, f64)>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub bins: Vec<BinCheck>,
    /// All concentration inequalities hold on every bin.
    pub holds: bool,
    /// Every fitted bin has `s >= gamma^{-2k-2} / (2d)`.
    pub eigen_floor_holds: bool,
}

struct Truth {
    mass: f64,
    cross: DVector<f64>,
    second: DMatrix<f64>,
}

/// Exact conditionals for every materialized bin, then the three
/// inequalities on each.
pub fn verify_update_statistics(
    est: &LplrEstimate,
    per_layer: usize,
    law: &OfflineDesign,
) -> Result<VerificationReport, SimError> {
    let tree = est.tree();
    let params = tree.params();
    let d = params.dim();
    let depth = tree.depth();
    let mut truth: Vec<Vec<Truth>> = (1..=depth)
        .map(|h| {
            tree.layer_bins(h)
                .iter()
                .map(|_| Truth {
                    mass: 0.0,
                    cross: DVector::zeros(d),
                    second: DMatrix::zeros(d, d),
                })
                .collect()
        })
        .collect();
    for (phi, p) in law.design.atoms().iter().zip(law.design.probs()) {
        let mean = phi.dot(&law.theta);
        let outcomes: Vec<(f64, f64)> = match law.noise {
            RewardNoise::None => vec![(mean.clamp(-1.0, 1.0), 1.0)],
            RewardNoise::Bernoulli => {
                let q = (1.0 + mean.clamp(-1.0, 1.0)) / 2.0;
                vec![(1.0, q), (-1.0, 1.0 - q)]
            }
            RewardNoise::Uniform { .. } => {
                return Err(SimError::Config(
                    "exact verification needs noiseless or Bernoulli rewards".into(),
                ))
            }
        };
        if phi.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (y, q) in outcomes {
            let w = p * q;
            if w == 0.0 {
                continue;
            }
            for (h, rec) in tree.route(phi, y, depth)?.into_iter().enumerate() {
                let Some(idx) = rec.bin else { break };
                let t = &mut truth[h][idx];
                t.mass += w;
                t.cross.axpy(w * rec.y, &rec.phi, 1.0);
                t.second.ger(w, &rec.phi, &rec.phi, 1.0);
            }
        }
    }

    let alpha = params.budget().alpha();
    let beta = params.beta();
    let delta = params.delta();
    let df = d as f64;
    let d1 = df + 1.0;
    let n = per_layer as f64;
    let rn = n.sqrt();
    let l48 = (48.0 * df / (beta * delta)).ln();
    let l24 = (24.0 * df / (beta * delta)).ln();
    let l48_plain = (48.0 * df / delta).ln();
    let enough_samples = n >= 2.0 * df * l24;
    let g = params.gamma();

    let mut bins = Vec::new();
    let mut eigen_floor_holds = true;
    for h in 1..=depth {
        for (idx, bin) in tree.layer_bins(h).iter().enumerate() {
            let t = &truth[h - 1][idx];
            let k = bin.shell() as i32;
            let mass_error = (bin.mass - t.mass).abs();
            let mass_bound = 6.2 * df * l48 / (alpha * rn);
            let mut holds = mass_error <= mass_bound;
            let scale = bin.mass * n;
            let cross = (t.mass >= 18.0 * df * df * l48 / (alpha * rn) && enough_samples).then(|| {
                let err = (&bin.cross_moment / scale - &t.cross / t.mass).norm();
                let bound = (19.0 * df * df + 29.0 * df) * g.powi(-k) * l48 / (alpha * t.mass * rn);
                (err, bound)
            });
            let second = (t.mass >= 18.0 * d1 * d1 * d1 * l24 / (alpha * rn) && enough_samples).then(|| {
                let diff = &bin.second_moment / scale - &t.second / t.mass;
                let sym = (&diff + diff.transpose()) * 0.5;
                let err = sym.symmetric_eigenvalues().amax();
                let bound = (7.0 * d1 * d1 * d1 + 29.0 * df) * g.powi(-2 * k) * l48_plain / (alpha * t.mass * rn);
                (err, bound)
            });
            for (err, bound) in cross.iter().chain(second.iter()) {
                holds &= err <= bound;
            }
            if bin.is_fitted() && bin.eigenvalue < g.powi(-2 * k - 2) / (2.0 * df) {
                eigen_floor_holds = false;
            }
            bins.push(BinCheck {
                layer: h,
                address: bin.address.ks().collect(),
                mass: t.mass,
                mass_error,
                mass_bound,
                cross,
                second,
                holds,
            });
        }
    }
    let holds = bins.iter().all(|b| b.holds);
    Ok(VerificationReport {
        bins,
        holds,
        eigen_floor_holds,
    })
}
