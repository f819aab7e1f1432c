//! Local randomizers: Laplace and Wishart noise plus the closed-form
//! density-ratio certificate used to audit each noise channel.
//!
//! The update routine of the layered oracle privatizes three statistics per
//! bin and per sample. Each uses its own channel with a third of the
//! per-sample budget:
//!
//! | channel        | sensitivity          | noise                                   |
//! |----------------|----------------------|-----------------------------------------|
//! | count          | 1                    | `Lap(3/alpha)`                          |
//! | cross moment   | `sqrt(d) * r_k`      | `Lap_d(3 sqrt(d) r_k / alpha)`          |
//! | second moment  | `r_k^2` (unit-scaled)| `3 r_k^2 (W_d(d+1, 1.5/alpha I) - mean)`|
//!
//! where `r_k = gamma^{-k}` is the shell radius of the bin. The confidence
//! routine adds one more Laplace channel at the full budget.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::CoreError;
use crate::math;

/// Per-sample local privacy parameter, `0 < alpha <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PrivacyBudget(f64);

impl PrivacyBudget {
    pub fn new(alpha: f64) -> Result<Self, CoreError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(CoreError::invalid("alpha", "must lie in (0, 1]"));
        }
        Ok(Self(alpha))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }

    /// Budget of each of the three update channels.
    pub fn update_share(self) -> f64 {
        self.0 / 3.0
    }

    /// Variance of the Gaussian columns behind the update Wishart channel.
    pub fn wishart_variance(self) -> f64 {
        1.5 / self.0
    }
}

impl TryFrom<f64> for PrivacyBudget {
    type Error = CoreError;
    fn try_from(alpha: f64) -> Result<Self, Self::Error> {
        Self::new(alpha)
    }
}

impl From<PrivacyBudget> for f64 {
    fn from(b: PrivacyBudget) -> f64 {
        b.0
    }
}

/// Whether randomizers inject noise. `Off` exists for exactness and
/// equivalence testing only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Private,
    Off,
}

impl NoiseMode {
    pub fn is_private(self) -> bool {
        matches!(self, NoiseMode::Private)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    LaplaceScalar,
    LaplaceVector { dim: usize },
    /// Scale matrix is `scale * I`.
    Wishart { dim: usize, degrees: usize },
}

/// A noise distribution with its scale parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    kind: NoiseKind,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseDraw {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, scale: f64) -> Result<Self, CoreError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CoreError::invalid("scale", "must be positive and finite"));
        }
        match kind {
            NoiseKind::LaplaceVector { dim: 0 } => {
                return Err(CoreError::invalid("dim", "must be at least 1"))
            }
            NoiseKind::Wishart { dim, degrees } if dim == 0 || degrees <= dim => {
                return Err(CoreError::invalid("degrees", "must exceed the dimension"))
            }
            _ => {}
        }
        Ok(Self { kind, scale })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Count channel of the update routine.
    pub fn count_channel(budget: PrivacyBudget) -> Self {
        Self {
            kind: NoiseKind::LaplaceScalar,
            scale: 3.0 / budget.alpha(),
        }
    }

    /// Cross-moment channel of the update routine for a bin of radius `radius`.
    pub fn moment_channel(dim: usize, budget: PrivacyBudget, radius: f64) -> Self {
        Self {
            kind: NoiseKind::LaplaceVector { dim },
            scale: 3.0 * math::sqrt(dim as f64) * radius / budget.alpha(),
        }
    }

    /// Second-moment channel of the update routine (before the `3 r^2` magnitude).
    pub fn gram_channel(dim: usize, budget: PrivacyBudget) -> Self {
        Self {
            kind: NoiseKind::Wishart {
                dim,
                degrees: dim + 1,
            },
            scale: budget.wishart_variance(),
        }
    }

    /// Error-accrual channel of the confidence routine.
    pub fn confidence_channel(budget: PrivacyBudget, eigenvalue: f64, radius: f64) -> Self {
        Self {
            kind: NoiseKind::LaplaceScalar,
            scale: radius / (math::sqrt(eigenvalue) * budget.alpha()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseDraw {
        match self.kind {
            NoiseKind::LaplaceScalar => NoiseDraw::Scalar(laplace(self.scale, rng)),
            NoiseKind::LaplaceVector { dim } => {
                NoiseDraw::Vector(DVector::from_fn(dim, |_, _| laplace(self.scale, rng)))
            }
            NoiseKind::Wishart { dim, degrees } => {
                let mut w = DMatrix::zeros(dim, dim);
                let sd = math::sqrt(self.scale);
                let mut z = alloc::vec![0.0; dim];
                for _ in 0..degrees {
                    for zi in z.iter_mut() {
                        *zi = sd * Distribution::<f64>::sample(&StandardNormal, rng);
                    }
                    add_outer_upper(&mut w, &z, 1.0);
                }
                mirror_upper(&mut w);
                NoiseDraw::Matrix(w)
            }
        }
    }
}

/// One Laplace(0, scale) draw.
#[inline]
pub(crate) fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rng.random::<bool>() {
        scale * e
    } else {
        -scale * e
    }
}

/// I.i.d. Laplace vector with the given per-component scale.
pub fn sample_laplace<R: Rng + ?Sized>(
    dim: usize,
    scale: f64,
    rng: &mut R,
) -> Result<DVector<f64>, CoreError> {
    if dim == 0 {
        return Err(CoreError::invalid("dim", "must be at least 1"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CoreError::invalid("scale", "must be positive and finite"));
    }
    Ok(DVector::from_fn(dim, |_, _| laplace(scale, rng)))
}

/// Wishart `W_dim(degrees, scale_matrix)` drawn as a sum of `degrees` outer
/// products of `N(0, scale_matrix)` vectors. The result is exactly symmetric.
pub fn sample_wishart<R: Rng + ?Sized>(
    dim: usize,
    degrees: usize,
    scale_matrix: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, CoreError> {
    if dim == 0 {
        return Err(CoreError::invalid("dim", "must be at least 1"));
    }
    if degrees <= dim {
        return Err(CoreError::invalid("degrees", "must exceed the dimension"));
    }
    if scale_matrix.nrows() != dim || scale_matrix.ncols() != dim {
        return Err(CoreError::DimensionMismatch {
            expected: dim,
            found: scale_matrix.nrows(),
        });
    }
    let factor = psd_square_root(scale_matrix)?;
    let mut w = DMatrix::zeros(dim, dim);
    let mut z = DVector::zeros(dim);
    for _ in 0..degrees {
        for zi in z.iter_mut() {
            *zi = Distribution::<f64>::sample(&StandardNormal, rng);
        }
        let x = &factor * &z;
        add_outer_upper(&mut w, x.as_slice(), 1.0);
    }
    mirror_upper(&mut w);
    Ok(w)
}

/// `magnitude * (W - 1.5 (d+1)/alpha I)` with `W ~ W_d(d+1, 1.5/alpha I)`.
pub fn centered_wishart_noise<R: Rng + ?Sized>(
    d: usize,
    budget: PrivacyBudget,
    magnitude: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>, CoreError> {
    if d == 0 {
        return Err(CoreError::invalid("d", "must be at least 1"));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(CoreError::invalid("magnitude", "must be non-negative and finite"));
    }
    let mut out = DMatrix::zeros(d, d);
    let mut scratch = Vec::new();
    add_centered_wishart(&mut out, budget, magnitude, rng, &mut scratch);
    Ok(out)
}

/// Adds centered Wishart noise to `target` in place, preserving exact symmetry
/// of a symmetric `target`. `scratch` holds the Gaussian columns between calls
/// so the hot path does not allocate.
pub(crate) fn add_centered_wishart<R: Rng + ?Sized>(
    target: &mut DMatrix<f64>,
    budget: PrivacyBudget,
    magnitude: f64,
    rng: &mut R,
    scratch: &mut Vec<f64>,
) {
    let d = target.nrows();
    let columns = d + 1;
    let variance = budget.wishart_variance();
    let sd = math::sqrt(variance);
    scratch.clear();
    for _ in 0..columns * d {
        let z: f64 = StandardNormal.sample(rng);
        scratch.push(sd * z);
    }
    let shift = columns as f64 * variance;
    for j in 0..d {
        for i in 0..=j {
            let mut v = 0.0;
            for c in 0..columns {
                v += scratch[c * d + i] * scratch[c * d + j];
            }
            if i == j {
                v -= shift;
            }
            let v = magnitude * v;
            target[(i, j)] += v;
            if i != j {
                target[(j, i)] += v;
            }
        }
    }
}

fn add_outer_upper(target: &mut DMatrix<f64>, x: &[f64], weight: f64) {
    let d = x.len();
    for j in 0..d {
        for i in 0..=j {
            target[(i, j)] += weight * x[i] * x[j];
        }
    }
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in 0..j {
            m[(j, i)] = m[(i, j)];
        }
    }
}

fn psd_square_root(m: &DMatrix<f64>) -> Result<DMatrix<f64>, CoreError> {
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(CoreError::NotSymmetric { asymmetry: asym });
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(CoreError::NotPositiveSemidefinite {
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| math::sqrt(l.max(0.0)));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Result of a closed-form Laplace density-ratio audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityRatioCertificate {
    /// `ln` of the worst-case density ratio between neighbouring inputs.
    pub log_ratio: f64,
    pub ratio: f64,
    pub target: f64,
    pub within_budget: bool,
}

/// Audits a Laplace channel of the given scale against inputs whose
/// outputs differ by at most `sensitivity` in l1 norm.
///
/// The worst-case ratio `exp(sensitivity / scale)` is confirmed by
/// evaluating the log-density difference on a grid of shifted inputs.
pub fn verify_density_ratio(scale: f64, sensitivity: f64, alpha_target: f64) -> DensityRatioCertificate {
    if !(scale > 0.0 && sensitivity > 0.0) {
        return DensityRatioCertificate {
            log_ratio: f64::INFINITY,
            ratio: f64::INFINITY,
            target: alpha_target,
            within_budget: false,
        };
    }
    let closed_form = sensitivity / scale;
    let mut grid_max = f64::NEG_INFINITY;
    let span = 4.0 * scale + 2.0 * sensitivity;
    for si in 0..=20 {
        let shift = -sensitivity + 2.0 * sensitivity * si as f64 / 20.0;
        for xi in 0..=200 {
            let x = -span + 2.0 * span * xi as f64 / 200.0;
            let log_ratio = ((x - shift).abs() - x.abs()) / scale;
            grid_max = grid_max.max(log_ratio);
        }
    }
    debug_assert!((grid_max - closed_form).abs() <= 1e-9 * closed_form.max(1.0));
    DensityRatioCertificate {
        log_ratio: closed_form,
        ratio: math::exp(closed_form),
        target: alpha_target,
        within_budget: closed_form <= alpha_target * (1.0 + 1e-12),
    }
}

/// A named per-channel certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCertificate {
    pub channel: &'static str,
    pub scale: f64,
    pub sensitivity: f64,
    pub certificate: DensityRatioCertificate,
}

/// Certificates for the two Laplace channels of the update routine on a bin
/// with shell radius `radius`, each against the `alpha/3` share.
pub fn update_channel_certificates(
    dim: usize,
    budget: PrivacyBudget,
    radius: f64,
) -> Vec<ChannelCertificate> {
    let count = NoiseSpec::count_channel(budget);
    let moment = NoiseSpec::moment_channel(dim, budget, radius);
    let share = budget.update_share();
    let moment_sensitivity = math::sqrt(dim as f64) * radius;
    alloc::vec![
        ChannelCertificate {
            channel: "count",
            scale: count.scale(),
            sensitivity: 1.0,
            certificate: verify_density_ratio(count.scale(), 1.0, share),
        },
        ChannelCertificate {
            channel: "cross_moment",
            scale: moment.scale(),
            sensitivity: moment_sensitivity,
            certificate: verify_density_ratio(moment.scale(), moment_sensitivity, share),
        },
    ]
}

/// Certificate for the confidence routine's accrual channel at full budget.
/// Per-sample contributions are bounded by `radius / sqrt(eigenvalue)`.
pub fn confidence_channel_certificate(
    budget: PrivacyBudget,
    eigenvalue: f64,
    radius: f64,
) -> ChannelCertificate {
    let spec = NoiseSpec::confidence_channel(budget, eigenvalue, radius);
    let sensitivity = radius / math::sqrt(eigenvalue);
    ChannelCertificate {
        channel: "confidence",
        scale: spec.scale(),
        sensitivity,
        certificate: verify_density_ratio(spec.scale(), sensitivity, budget.alpha()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Channel, StreamKey};

    fn rng() -> crate::rng::StreamRng {
        StreamKey::new(11, 0, Channel::Selftest).rng()
    }

    #[test]
    fn budget_rejects_out_of_range() {
        assert!(PrivacyBudget::new(0.0).is_err());
        assert!(PrivacyBudget::new(1.5).is_err());
        assert!(PrivacyBudget::new(f64::NAN).is_err());
        assert_eq!(PrivacyBudget::new(1.0).unwrap().update_share(), 1.0 / 3.0);
    }

    #[test]
    fn laplace_rejects_bad_parameters() {
        let mut r = rng();
        assert!(sample_laplace(0, 1.0, &mut r).is_err());
        assert!(sample_laplace(2, 0.0, &mut r).is_err());
        assert!(sample_laplace(2, -1.0, &mut r).is_err());
    }

    #[test]
    fn laplace_degenerates_with_scale() {
        let mut r = rng();
        for _ in 0..1000 {
            let v = sample_laplace(1, 1e-300, &mut r).unwrap();
            assert!(v[0].abs() < 1e-290);
        }
    }

    #[test]
    fn laplace_moments_match_closed_form() {
        // Laplace(0, 1): mean 0, variance 2.
        let mut r = rng();
        let n = 1_000_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let v = sample_laplace(3, 1.0, &mut r).unwrap();
            for i in 0..3 {
                sum[i] += v[i];
                sq[i] += v[i] * v[i];
            }
        }
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() <= 0.01, "mean {mean}");
            assert!((var - 2.0).abs() <= 0.05, "var {var}");
        }
    }

    #[test]
    fn laplace_tail_matches_closed_form() {
        // P(|v| > t) = exp(-t/b); t = 4 ln 2, b = 2 gives 1/4.
        let mut r = rng();
        let t = 2.0 * core::f64::consts::LN_2 * 2.0;
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| sample_laplace(1, 2.0, &mut r).unwrap()[0].abs() > t)
            .count();
        let p = hits as f64 / n as f64;
        assert!((p - 0.25).abs() <= 0.01, "tail {p}");
    }

    #[test]
    fn wishart_zero_scale_is_zero() {
        let mut r = rng();
        let w = sample_wishart(2, 3, &DMatrix::zeros(2, 2), &mut r).unwrap();
        assert_eq!(w, DMatrix::zeros(2, 2));
    }

    #[test]
    fn wishart_mean_is_degrees_times_scale() {
        let mut r = rng();
        let n = 100_000;
        let v = DMatrix::identity(2, 2);
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            acc += sample_wishart(2, 3, &v, &mut r).unwrap();
        }
        acc /= n as f64;
        let expected = DMatrix::identity(2, 2) * 3.0;
        assert!((acc - expected).amax() <= 0.05);
    }

    #[test]
    fn wishart_draws_are_psd_and_symmetric() {
        let mut r = rng();
        let v = DMatrix::identity(3, 3);
        for _ in 0..2000 {
            let w = sample_wishart(3, 4, &v, &mut r).unwrap();
            assert_eq!(w, w.transpose());
            assert!(w.symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn wishart_rejects_bad_scale() {
        let mut r = rng();
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            sample_wishart(2, 3, &asym, &mut r),
            Err(CoreError::NotSymmetric { .. })
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            sample_wishart(2, 3, &indefinite, &mut r),
            Err(CoreError::NotPositiveSemidefinite { .. })
        ));
        assert!(sample_wishart(2, 2, &DMatrix::identity(2, 2), &mut r).is_err());
    }

    #[test]
    fn centered_noise_zero_magnitude() {
        let mut r = rng();
        let b = PrivacyBudget::new(1.0).unwrap();
        assert_eq!(centered_wishart_noise(3, b, 0.0, &mut r).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn centered_noise_has_zero_mean() {
        let mut r = rng();
        let b = PrivacyBudget::new(1.0).unwrap();
        let n = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let w = centered_wishart_noise(2, b, 1.0, &mut r).unwrap();
            assert_eq!(w, w.transpose());
            acc += w;
        }
        acc /= n as f64;
        let op = acc.symmetric_eigen().eigenvalues.amax();
        assert!(op <= 0.1, "operator norm of mean {op}");
    }

    #[test]
    fn density_ratio_examples() {
        for alpha in [0.1, 0.5, 1.0] {
            let c = verify_density_ratio(3.0 / alpha, 1.0, alpha / 3.0);
            assert!(c.within_budget);
            assert!((c.ratio - math::exp(alpha / 3.0)).abs() < 1e-12);
            assert!(!verify_density_ratio(1.0 / alpha, 2.0, alpha).within_budget);
        }
        for d in 1..=4 {
            for k in 0..=5 {
                let alpha = 0.7;
                let r = math::powi(2.5, -k);
                let s = math::sqrt(d as f64) * r;
                assert!(verify_density_ratio(3.0 * s / alpha, s, alpha / 3.0).within_budget);
            }
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let b = PrivacyBudget::new(0.5).unwrap();
        let a = centered_wishart_noise(3, b, 2.0, &mut rng()).unwrap();
        let c = centered_wishart_noise(3, b, 2.0, &mut rng()).unwrap();
        assert_eq!(a, c);
        let spec = NoiseSpec::moment_channel(3, b, 0.25);
        assert_eq!(spec.sample(&mut rng()), spec.sample(&mut rng()));
    }
}
