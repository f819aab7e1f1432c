//! Plain layered PCR over exact sums, written independently of the
//! streaming oracle.
//!
//! The reference stores every residual per bin, keyed by address, and
//! recomputes all statistics from those lists. It shares only nalgebra with
//! the oracle, so agreement to the bit checks the routing, accumulation,
//! thresholds and width recursion rather than the linear algebra.

use std::collections::BTreeMap;

use lplr_core::environments::{DiscreteDesign, RewardNoise};
use lplr_core::lplr::{run_oracle, LplrEstimate, OracleConfig};
use lplr_core::mechanisms::{NoiseMode, PrivacyBudget};
use lplr_core::oracle::Estimate;
use lplr_core::partition::{CiState, Kappas, LayerParams};
use lplr_core::rng::{Channel, StreamKey};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

/// One fitted bin of the reference.
#[derive(Debug, Clone)]
pub struct Fit {
    pub u: DVector<f64>,
    pub s: f64,
    pub theta: DVector<f64>,
    /// `(constant, error coefficient)` once the width is set.
    pub width: Result<(f64, f64), f64>,
}

pub struct Reference {
    params: LayerParams,
    fits: BTreeMap<Vec<usize>, Fit>,
    fallback: BTreeMap<Vec<usize>, f64>,
}

impl Reference {
    fn shell(&self, norm: f64) -> usize {
        let mut k = 0;
        for j in 0..=self.params.levels() {
            if norm <= self.params.radius(j) {
                k = j;
            }
        }
        k
    }

    pub fn fitted(&self, addr: &[usize]) -> Option<&Fit> {
        self.fits.get(addr).filter(|f| f.width.is_ok())
    }

    /// Residual, address and accumulated width after the fitted layers
    /// above `target`; `None` if the path ends earlier.
    fn descend(&self, phi: &DVector<f64>, y: f64, target: usize) -> Option<(DVector<f64>, f64, Vec<usize>, f64)> {
        let mut phi = phi.clone();
        let mut y = y;
        let mut addr = vec![self.shell(phi.norm())];
        let mut width = 0.0;
        for _ in 1..target {
            let fit = self.fitted(&addr)?;
            let (c, e) = fit.width.unwrap();
            width = (width + c + e * (fit.u.dot(&phi).abs() / fit.s.sqrt())).min(1.0);
            y -= phi.dot(&fit.theta);
            let along = fit.u.dot(&phi);
            for i in 0..phi.len() {
                phi[i] += -along * fit.u[i];
            }
            addr.push(self.shell(phi.norm()));
        }
        Some((phi, y, addr, width))
    }

    fn ancestors(&self, addr: &[usize]) -> DMatrix<f64> {
        let d = self.params.dim();
        let cols: Vec<_> = (1..addr.len()).rev().map(|l| self.fits[&addr[..l]].u.clone()).collect();
        if cols.is_empty() {
            DMatrix::zeros(d, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }

    fn layer_addresses(&self, h: usize) -> Vec<Vec<usize>> {
        let m = self.params.levels();
        if h == 1 {
            return (0..=m).map(|k| vec![k]).collect();
        }
        let parents: Vec<_> = self
            .fits
            .iter()
            .filter(|(a, f)| a.len() == h - 1 && f.width.is_ok())
            .map(|(a, _)| a.clone())
            .collect();
        parents
            .into_iter()
            .flat_map(|p| {
                (0..=m).map(move |k| {
                    let mut a = p.clone();
                    a.push(k);
                    a
                })
            })
            .collect()
    }

    pub fn fit(params: LayerParams, n: usize, samples: &[(DVector<f64>, f64)]) -> Self {
        let mut me = Self {
            params,
            fits: BTreeMap::new(),
            fallback: BTreeMap::new(),
        };
        let d = me.params.dim();
        let df = d as f64;
        let d1 = df + 1.0;
        let g = me.params.gamma();
        let k = *me.params.kappas();
        let nf = n as f64;
        let act = k.activity * g * g * d1 * d1 * d1 / nf.sqrt();
        let ci_act = k.ci_activity * g * df * df.sqrt() / nf.sqrt();
        for h in 1..=d {
            let update = &samples[(2 * h - 2) * n..(2 * h - 1) * n];
            let confidence = &samples[(2 * h - 1) * n..2 * h * n];
            let mut buckets: BTreeMap<Vec<usize>, Vec<(DVector<f64>, f64)>> = BTreeMap::new();
            for (phi, y) in update {
                if let Some((r, ry, addr, _)) = me.descend(phi, y.clamp(-1.0, 1.0), h) {
                    buckets.entry(addr).or_default().push((r, ry.clamp(-1.0, 1.0)));
                }
            }
            let mut layer = BTreeMap::new();
            for addr in me.layer_addresses(h) {
                let data = buckets.remove(&addr).unwrap_or_default();
                let mut count = 0.0;
                let mut cross = DVector::<f64>::zeros(d);
                let mut gram = DMatrix::<f64>::zeros(d, d);
                for (phi, y) in &data {
                    count += 1.0;
                    for i in 0..d {
                        cross[i] += y * phi[i];
                    }
                    for j in 0..d {
                        for i in 0..d {
                            gram[(i, j)] += phi[i] * phi[j];
                        }
                    }
                }
                let mass = count / nf;
                let last = *addr.last().unwrap();
                if !(mass > act) || last == me.params.levels() {
                    me.fallback.insert(addr.clone(), me.params.radius(last));
                    continue;
                }
                let denom = mass * nf;
                let raw = gram.map(|v| v / denom);
                let basis = me.ancestors(&addr);
                let proj = if basis.ncols() == 0 {
                    DMatrix::identity(d, d)
                } else {
                    DMatrix::identity(d, d) - &basis * basis.transpose()
                };
                let sym = (&raw + raw.transpose()) * 0.5;
                let inner = &proj * sym * &proj;
                let inner = (&inner + inner.transpose()) * 0.5;
                let eig = inner.try_symmetric_eigen(f64::EPSILON, 10_000).unwrap();
                let values = eig.eigenvalues.map(|l| l.max(0.0));
                let top = values.imax();
                let s = values[top];
                let r = me.params.radius(last);
                if !(s > 1e-12 * r * r) {
                    me.fallback.insert(addr.clone(), r);
                    continue;
                }
                let mut u = eig.eigenvectors.column(top).into_owned();
                if basis.ncols() > 0 {
                    let along = basis.transpose() * &u;
                    u -= &basis * along;
                    let norm = u.norm();
                    u /= norm;
                }
                if let Some(first) = u.iter().find(|v| v.abs() > 1e-12) {
                    if *first < 0.0 {
                        u.neg_mut();
                    }
                }
                let coef = (u.dot(&cross) / denom) / s;
                let theta = &u * coef;
                layer.insert(addr, (mass, Fit { u, s, theta, width: Err(0.0) }));
            }
            for (addr, (_, fit)) in &layer {
                me.fits.insert(addr.clone(), fit.clone());
            }
            let mut errors: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            for (phi, y) in confidence {
                if let Some((r, _, addr, width)) = me.descend(phi, y.clamp(-1.0, 1.0), h) {
                    if let Some((_, fit)) = layer.get(&addr) {
                        *errors.entry(addr).or_insert(0.0) += width * fit.u.dot(&r).abs() / fit.s.sqrt();
                    }
                }
            }
            for (addr, (mass, mut fit)) in layer {
                let last = *addr.last().unwrap();
                if !(mass > ci_act) {
                    me.fits.remove(&addr);
                    me.fallback.insert(addr, me.params.radius(last));
                    continue;
                }
                let denom = mass * nf;
                let corr = k.ci_correction * g * df * df.sqrt() / (mass * nf.sqrt());
                let sum = errors.get(&addr).copied().unwrap_or(0.0);
                let bar = (sum / denom + corr).max(0.0);
                let c = k.ci_width * g * g * (d1 * d1) * (d1 * d1) / (mass * nf.sqrt());
                fit.width = Ok((c, bar));
                me.fits.insert(addr, fit);
            }
        }
        me
    }

    pub fn predict(&self, phi: &DVector<f64>) -> (f64, f64) {
        if phi.iter().all(|v| *v == 0.0) {
            return (0.0, 0.0);
        }
        let d = self.params.dim();
        let mut phi = phi.clone();
        let mut addr = vec![self.shell(phi.norm())];
        let (mut value, mut width) = (0.0, 0.0);
        loop {
            let Some(fit) = self.fitted(&addr) else {
                width = (width + self.fallback[&addr]).min(1.0);
                break;
            };
            let (c, e) = fit.width.unwrap();
            width = (width + c + e * (fit.u.dot(&phi).abs() / fit.s.sqrt())).min(1.0);
            value += phi.dot(&fit.theta);
            if addr.len() == d {
                break;
            }
            let along = fit.u.dot(&phi);
            for i in 0..d {
                phi[i] += -along * fit.u[i];
            }
            addr.push(self.shell(phi.norm()));
        }
        if width >= 1.0 {
            return (0.0, 1.0);
        }
        (value.clamp(-1.0, 1.0), width)
    }
}

pub fn random_unit_ball(rng: &mut impl Rng, d: usize, min_norm: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n <= 1.0 && n >= min_norm {
            return v;
        }
    }
}

/// Random small problem: `d <= 3`, a few atoms, modest batches and loose
/// constants so that many bins get fitted.
pub struct Instance {
    pub params: LayerParams,
    pub n: usize,
    pub design: DiscreteDesign,
    pub theta: DVector<f64>,
    pub samples: Vec<(DVector<f64>, f64)>,
}

impl Instance {
    pub fn random(seed: u64, noisy_rewards: bool) -> Self {
        let mut rng = StreamKey::new(seed, 0, Channel::Selftest).rng();
        let d = rng.random_range(1..=3usize);
        let (beta, horizon) = [(0.1, 1024u64), (0.25, 256), (0.5, 16)][rng.random_range(0..3)];
        let kappas = Kappas {
            activity: 0.002,
            ci_activity: 0.002,
            ci_correction: 0.1,
            ci_width: 0.001,
        };
        let params = LayerParams::new(d, horizon, beta, PrivacyBudget::new(1.0).expect("valid"), 0.05, kappas, false)
            .expect("valid parameters");
        let atoms: Vec<_> = (0..rng.random_range(2..=6)).map(|_| random_unit_ball(&mut rng, d, 0.05)).collect();
        let probs = vec![1.0 / atoms.len() as f64; atoms.len()];
        let design = DiscreteDesign::new(atoms, probs).expect("atoms in the unit ball");
        let theta = random_unit_ball(&mut rng, d, 0.0);
        let n = rng.random_range(40..=300);
        let noise = if noisy_rewards { RewardNoise::Bernoulli } else { RewardNoise::None };
        let samples: Vec<_> = design.stream(&theta, noise, &mut rng).take(2 * d * n).collect();
        Self {
            params,
            n,
            design,
            theta,
            samples,
        }
    }

    /// The streaming oracle with noise switched off.
    pub fn run_lplr(&self) -> LplrEstimate {
        let config = OracleConfig::new(self.params.clone(), self.n, NoiseMode::Off).expect("valid config");
        let rng = StreamKey::new(0, 0, Channel::OracleNoise).rng();
        run_oracle(self.samples.iter().map(|(p, y)| Some((p, *y))), config, rng).expect("full stream")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExactnessReport {
    pub instances: usize,
    pub fitted_bins: usize,
    pub probes: usize,
    /// Human-readable description of every disagreement.
    pub mismatches: Vec<String>,
}

/// Compares the zero-noise oracle with the reference on `instances` random
/// problems, bin by bin and prediction by prediction, to the bit.
pub fn oracle_equivalence(first_seed: u64, instances: usize) -> ExactnessReport {
    let mut report = ExactnessReport {
        instances,
        ..Default::default()
    };
    for seed in first_seed..first_seed + instances as u64 {
        let inst = Instance::random(seed, true);
        let est = inst.run_lplr();
        let reference = Reference::fit(inst.params.clone(), inst.n, &inst.samples);
        let tree = est.tree();
        for h in 1..=tree.depth() {
            for bin in tree.layer_bins(h) {
                let addr: Vec<usize> = bin.address.ks().collect();
                let same = match (bin.ci, reference.fitted(&addr)) {
                    (CiState::Fitted { ci_const, error_bar }, Some(fit)) => {
                        report.fitted_bins += 1;
                        bin.direction == fit.u
                            && bin.eigenvalue.to_bits() == fit.s.to_bits()
                            && bin.theta == fit.theta
                            && Ok((ci_const, error_bar)) == fit.width
                    }
                    (CiState::Fallback { width }, None) => {
                        reference.fallback.get(&addr).map(|w| w.to_bits()) == Some(width.to_bits())
                    }
                    _ => false,
                };
                if !same {
                    report.mismatches.push(format!("seed {seed}: bin {addr:?} differs"));
                }
            }
        }
        let mut rng = StreamKey::new(seed, 1, Channel::Audit).rng();
        let probes: Vec<_> = inst
            .design
            .atoms()
            .iter()
            .cloned()
            .chain((0..20).map(|_| random_unit_ball(&mut rng, inst.params.dim(), 0.0)))
            .collect();
        for phi in probes {
            report.probes += 1;
            let p = est.predict(&phi);
            let (v, w) = reference.predict(&phi);
            if (p.value.to_bits(), p.width.to_bits()) != (v.to_bits(), w.to_bits()) {
                report.mismatches.push(format!("seed {seed}: prediction at {:?} differs", phi.as_slice()));
            }
        }
    }
    report
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IdentityReport {
    /// Features whose whole path was fitted.
    pub checked: usize,
    pub max_error: f64,
}

/// On noiseless data, features whose path is fitted on every layer are
/// composed exactly: the fitted directions span the space, so the layer
/// coefficients add up to `theta*`.
pub fn composition_identity(first_seed: u64, instances: usize) -> IdentityReport {
    let mut report = IdentityReport::default();
    for seed in first_seed..first_seed + instances as u64 {
        let inst = Instance::random(seed, false);
        let est = inst.run_lplr();
        let tree = est.tree();
        let d = inst.params.dim();
        for phi in inst.design.atoms() {
            let records = tree.route(phi, 0.0, tree.depth()).expect("valid feature");
            let full = records.len() == d
                && records
                    .iter()
                    .enumerate()
                    .all(|(i, r)| r.bin.is_some_and(|b| tree.bin(i + 1, b).is_fitted()));
            if !full {
                continue;
            }
            report.checked += 1;
            let err = (est.composed_value(phi) - phi.dot(&inst.theta)).abs();
            report.max_error = report.max_error.max(err);
        }
    }
    report
}
