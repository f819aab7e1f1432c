//! Comparison estimators and policies: ridge regression, input
//! perturbation, and optimism over privatized sufficient statistics.

use alloc::boxed::Box;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;
use crate::math;
use crate::mechanisms::{add_centered_wishart, laplace, NoiseMode, PrivacyBudget};
use crate::oracle::{is_dummy, Estimate, OracleFactory, Prediction, RegressionOracle};
use crate::rng::StreamRng;
use crate::trace::{Decision, Policy};

/// Accumulated `sum phi phi^T` and `sum y phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub gram: DMatrix<f64>,
    pub cross: DVector<f64>,
    pub count: usize,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            gram: DMatrix::zeros(dim, dim),
            cross: DVector::zeros(dim),
            count: 0,
        }
    }

    pub fn add(&mut self, phi: &DVector<f64>, y: f64) {
        self.gram.ger(1.0, phi, phi, 1.0);
        self.cross.axpy(y, phi, 1.0);
        self.count += 1;
    }
}

fn solve_regularized(gram: &DMatrix<f64>, cross: &DVector<f64>, reg: f64) -> Result<DVector<f64>, CoreError> {
    let d = gram.nrows();
    let system = gram + DMatrix::identity(d, d) * reg;
    let chol = system
        .cholesky()
        .ok_or(CoreError::NotPositiveSemidefinite { min_eigenvalue: f64::NAN })?;
    Ok(chol.solve(cross))
}

/// Minimizer of `sum (y - phi^T theta)^2 + reg ‖theta‖^2`.
pub fn ridge_fit(data: &[(DVector<f64>, f64)], dim: usize, reg: f64) -> Result<DVector<f64>, CoreError> {
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(CoreError::invalid("reg", "must be positive"));
    }
    let mut m = Moments::new(dim);
    for (phi, y) in data {
        if phi.len() != dim {
            return Err(CoreError::DimensionMismatch {
                expected: dim,
                found: phi.len(),
            });
        }
        m.add(phi, *y);
    }
    solve_regularized(&m.gram, &m.cross, reg)
}

/// Linear prediction with ellipsoidal width `min(1, scale ‖phi‖_{G^{-1}})`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeEstimate {
    pub theta: DVector<f64>,
    pub gram_inverse: DMatrix<f64>,
    pub width_scale: f64,
}

impl Estimate for RidgeEstimate {
    fn predict(&self, phi: &DVector<f64>) -> Prediction {
        if is_dummy(phi) {
            return Prediction {
                value: 0.0,
                width: 0.0,
            };
        }
        let spread = math::sqrt((phi.transpose() * &self.gram_inverse * phi)[(0, 0)].max(0.0));
        Prediction {
            value: phi.dot(&self.theta).clamp(-1.0, 1.0),
            width: (self.width_scale * spread).min(1.0),
        }
    }
}

/// Non-private streaming ridge oracle.
pub struct RidgeOracle {
    moments: Moments,
    reg: f64,
    width_scale: f64,
    remaining: usize,
}

impl RidgeOracle {
    pub fn new(dim: usize, reg: f64, width_scale: f64, budget_samples: usize) -> Result<Self, CoreError> {
        if !(reg > 0.0) {
            return Err(CoreError::invalid("reg", "must be positive"));
        }
        Ok(Self {
            moments: Moments::new(dim),
            reg,
            width_scale,
            remaining: budget_samples,
        })
    }

    pub fn estimate(&self) -> Result<RidgeEstimate, CoreError> {
        let theta = solve_regularized(&self.moments.gram, &self.moments.cross, self.reg)?;
        let d = theta.len();
        let system = &self.moments.gram + DMatrix::identity(d, d) * self.reg;
        let gram_inverse = system
            .try_inverse()
            .ok_or(CoreError::NotPositiveSemidefinite { min_eigenvalue: f64::NAN })?;
        Ok(RidgeEstimate {
            theta,
            gram_inverse,
            width_scale: self.width_scale,
        })
    }
}

impl RegressionOracle for RidgeOracle {
    fn feed(&mut self, sample: Option<(&DVector<f64>, f64)>) -> Result<(), CoreError> {
        if self.remaining == 0 {
            return Ok(());
        }
        self.remaining -= 1;
        if let Some((phi, y)) = sample {
            self.moments.add(phi, y.clamp(-1.0, 1.0));
        }
        Ok(())
    }

    fn is_complete(&self) -> bool {
        self.remaining == 0
    }

    fn finalize(self: Box<Self>) -> Result<Box<dyn Estimate>, CoreError> {
        Ok(Box::new(self.estimate()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeFactory {
    pub dim: usize,
    pub reg: f64,
    pub width_scale: f64,
}

impl OracleFactory for RidgeFactory {
    fn build(&self, _epoch: usize, _action: usize, samples: usize, _rng: StreamRng) -> Result<Box<dyn RegressionOracle>, CoreError> {
        Ok(Box::new(RidgeOracle::new(self.dim, self.reg, self.width_scale, samples)?))
    }
}

/// Estimator applied after input perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbedEstimator {
    /// Ridge on the perturbed records.
    Ridge,
    /// Ridge after subtracting the known noise covariance `2/alpha^2 I` per
    /// record from the perturbed Gram matrix, clipped to PSD.
    BiasCorrected,
}

/// Keeps only `(phi + Lap_d(1/alpha), y + Lap(1/alpha))`. Dummy records are
/// perturbed zeros, so their release looks like any other.
pub struct InputPerturbationOracle {
    dim: usize,
    alpha: f64,
    noise: NoiseMode,
    records: Vec<(DVector<f64>, f64)>,
    rng: StreamRng,
}

impl InputPerturbationOracle {
    /// `alpha` may exceed 1 here to study the low-noise limit.
    pub fn new(dim: usize, alpha: f64, noise: NoiseMode, rng: StreamRng) -> Result<Self, CoreError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CoreError::invalid("alpha", "must be positive"));
        }
        Ok(Self {
            dim,
            alpha,
            noise,
            records: Vec::new(),
            rng,
        })
    }

    pub fn push(&mut self, sample: Option<(&DVector<f64>, f64)>) -> Result<(), CoreError> {
        let (mut phi, mut y) = match sample {
            Some((phi, y)) => {
                if phi.len() != self.dim {
                    return Err(CoreError::DimensionMismatch {
                        expected: self.dim,
                        found: phi.len(),
                    });
                }
                (phi.clone(), y.clamp(-1.0, 1.0))
            }
            None => (DVector::zeros(self.dim), 0.0),
        };
        if self.noise.is_private() {
            let b = 1.0 / self.alpha;
            for v in phi.iter_mut() {
                *v += laplace(b, &mut self.rng);
            }
            y += laplace(b, &mut self.rng);
        }
        self.records.push((phi, y));
        Ok(())
    }

    /// Everything the oracle retains.
    pub fn records(&self) -> &[(DVector<f64>, f64)] {
        &self.records
    }

    pub fn fit(&self, estimator: PerturbedEstimator, reg: f64) -> Result<DVector<f64>, CoreError> {
        match estimator {
            PerturbedEstimator::Ridge => ridge_fit(&self.records, self.dim, reg),
            PerturbedEstimator::BiasCorrected => {
                let mut m = Moments::new(self.dim);
                for (phi, y) in &self.records {
                    m.add(phi, *y);
                }
                if self.noise.is_private() {
                    let shift = m.count as f64 * 2.0 / (self.alpha * self.alpha);
                    for i in 0..self.dim {
                        m.gram[(i, i)] -= shift;
                    }
                }
                let eig = m.gram.symmetric_eigen();
                let mut theta = DVector::zeros(self.dim);
                for (c, &l) in eig.eigenvalues.iter().enumerate() {
                    let v = eig.eigenvectors.column(c);
                    theta.axpy(v.dot(&m.cross) / (l.max(0.0) + reg), &v, 1.0);
                }
                Ok(theta)
            }
        }
    }
}

/// Perturbs every record of `data`, then fits.
pub fn input_perturb_fit(
    data: &[(DVector<f64>, f64)],
    dim: usize,
    alpha: f64,
    estimator: PerturbedEstimator,
    reg: f64,
    rng: StreamRng,
) -> Result<DVector<f64>, CoreError> {
    let mut oracle = InputPerturbationOracle::new(dim, alpha, NoiseMode::Private, rng)?;
    for (phi, y) in data {
        oracle.push(Some((phi, *y)))?;
    }
    oracle.fit(estimator, reg)
}

/// `Q max(L, 0) Q^T` for a symmetric matrix.
pub fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for (c, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 0.0 {
            let v = eig.eigenvectors.column(c);
            out.ger(l, &v, &v, 1.0);
        }
    }
    (&out + out.transpose()) * 0.5
}

/// Privatized `sum phi phi^T` and `sum y phi` using the second-moment and
/// cross-moment channels of the layered oracle at unit radius.
#[derive(Debug, Clone)]
pub struct PrivateMoments {
    pub moments: Moments,
    budget: PrivacyBudget,
    noise: NoiseMode,
    scratch: Vec<f64>,
}

impl PrivateMoments {
    pub fn new(dim: usize, budget: PrivacyBudget, noise: NoiseMode) -> Self {
        Self {
            moments: Moments::new(dim),
            budget,
            noise,
            scratch: Vec::new(),
        }
    }

    pub fn add(&mut self, phi: &DVector<f64>, y: f64, rng: &mut StreamRng) {
        self.moments.add(phi, y.clamp(-1.0, 1.0));
        if self.noise.is_private() {
            let alpha = self.budget.alpha();
            let d = phi.len();
            let scale = 3.0 * math::sqrt(d as f64) / alpha;
            for v in self.moments.cross.iter_mut() {
                *v += laplace(scale, rng);
            }
            add_centered_wishart(&mut self.moments.gram, self.budget, 3.0, rng, &mut self.scratch);
        }
    }

    /// `clip_psd(G) + (reg + shift sqrt(t)) I` with clipping skipped when
    /// noise is off.
    pub fn regularized_gram(&self, reg: f64, shift: f64) -> DMatrix<f64> {
        let d = self.moments.gram.nrows();
        let base = if self.noise.is_private() {
            clip_psd(&self.moments.gram)
        } else {
            self.moments.gram.clone()
        };
        let lift = reg + shift * math::sqrt(self.moments.count as f64);
        base + DMatrix::identity(d, d) * lift
    }
}

/// Offline regression on privatized sufficient statistics.
pub fn suffstat_fit(
    data: &[(DVector<f64>, f64)],
    dim: usize,
    budget: PrivacyBudget,
    noise: NoiseMode,
    reg: f64,
    shift: f64,
    rng: &mut StreamRng,
) -> Result<DVector<f64>, CoreError> {
    let mut pm = PrivateMoments::new(dim, budget, noise);
    for (phi, y) in data {
        pm.add(phi, *y, rng);
    }
    let gram = pm.regularized_gram(reg, shift);
    let chol = gram
        .cholesky()
        .ok_or(CoreError::NotPositiveSemidefinite { min_eigenvalue: f64::NAN })?;
    Ok(chol.solve(&pm.moments.cross))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UcbSettings {
    pub reg: f64,
    /// Growth of the noise-absorbing ridge, in units of `sqrt(t)`.
    pub shift: f64,
    /// Inflation of the ellipsoidal bonus.
    pub bonus: f64,
}

impl Default for UcbSettings {
    fn default() -> Self {
        Self {
            reg: 1.0,
            shift: 1.0,
            bonus: 1.0,
        }
    }
}

/// Optimistic policy over one shared privatized `(G, b)` pair. Illustrative
/// only: the bonus is the textbook ellipsoidal one with a tunable inflation.
pub struct SuffstatUcb {
    stats: PrivateMoments,
    settings: UcbSettings,
    rng: StreamRng,
}

impl SuffstatUcb {
    pub fn new(dim: usize, budget: PrivacyBudget, noise: NoiseMode, settings: UcbSettings, rng: StreamRng) -> Self {
        Self {
            stats: PrivateMoments::new(dim, budget, noise),
            settings,
            rng,
        }
    }
}

impl Policy for SuffstatUcb {
    fn decide(&mut self, features: &[DVector<f64>], _rng: &mut StreamRng) -> Result<Decision, CoreError> {
        let gram = self.stats.regularized_gram(self.settings.reg, self.settings.shift);
        let chol = gram
            .cholesky()
            .ok_or(CoreError::NotPositiveSemidefinite { min_eigenvalue: f64::NAN })?;
        let theta = chol.solve(&self.stats.moments.cross);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (a, phi) in features.iter().enumerate() {
            let spread = math::sqrt(phi.dot(&chol.solve(phi)).max(0.0));
            let score = phi.dot(&theta) + self.settings.bonus * spread;
            if score > best_score {
                best = a;
                best_score = score;
            }
        }
        Ok(Decision {
            action: best,
            active_set_size: features.len(),
        })
    }

    fn observe(&mut self, features: &[DVector<f64>], action: usize, reward: f64) -> Result<(), CoreError> {
        self.stats.add(&features[action], reward, &mut self.rng);
        Ok(())
    }
}
