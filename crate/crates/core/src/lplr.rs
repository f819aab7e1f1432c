//! Layered private linear regression.
//!
//! The oracle reads `2 d n` records. For each layer `h = 1..d` it spends `n`
//! records accumulating privatized per-bin statistics, fits a one-direction
//! principal component regression in every bin with enough estimated mass,
//! then spends `n` fresh records estimating how much error the earlier
//! layers leave behind in each bin. The finished tree predicts by summing
//! the per-layer fits along a feature's path and reports a pointwise
//! confidence width built from the same path.

use alloc::boxed::Box;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;
use crate::math;
use crate::mechanisms::{add_centered_wishart, laplace, NoiseMode};
use crate::oracle::{is_dummy, Estimate, Prediction, RegressionOracle};
use crate::partition::{check_feature, step_residual, BinNode, CiState, LayerParams, PartitionTree};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    params: LayerParams,
    per_layer: usize,
    noise: NoiseMode,
}

impl OracleConfig {
    /// In strict-constants mode a nonzero `per_layer` must reach
    /// [`OracleConfig::sample_floor`]. `per_layer = 0` yields the degenerate
    /// oracle whose bins are all inactive.
    pub fn new(params: LayerParams, per_layer: usize, noise: NoiseMode) -> Result<Self, CoreError> {
        if params.strict_constants() && per_layer > 0 && (per_layer as f64) < Self::sample_floor(&params) {
            return Err(CoreError::InvalidParameter {
                name: "per_layer",
                reason: alloc::format!(
                    "{per_layer} is below the floor {:.1}",
                    Self::sample_floor(&params)
                ),
            });
        }
        Ok(Self {
            params,
            per_layer,
            noise,
        })
    }

    /// `2 d ln(24 d / (beta delta))`.
    pub fn sample_floor(params: &LayerParams) -> f64 {
        let d = params.dim() as f64;
        2.0 * d * math::ln(24.0 * d / (params.beta() * params.delta()))
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn per_layer(&self) -> usize {
        self.per_layer
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    /// Records consumed before the oracle is complete.
    pub fn total_samples(&self) -> usize {
        2 * self.params.dim() * self.per_layer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Update,
    Confidence,
    Done,
}

/// Emitted by [`LplrOracle::push`] when a batch closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseEvent {
    UpdateClosed { layer: usize },
    LayerClosed { layer: usize },
}

/// Streaming form of the layered oracle.
pub struct LplrOracle {
    config: OracleConfig,
    tree: PartitionTree,
    rng: StreamRng,
    layer: usize,
    phase: Phase,
    fed: usize,
    phi: DVector<f64>,
    scratch: Vec<f64>,
}

impl LplrOracle {
    pub fn new(config: OracleConfig, rng: StreamRng) -> Self {
        let mut tree = PartitionTree::new(config.params.clone());
        let d = config.params.dim();
        let mut phase = Phase::Update;
        if config.per_layer == 0 {
            let params = config.params.clone();
            for bin in tree.layer_bins_mut(1) {
                bin.active = false;
                bin.ci = CiState::Fallback {
                    width: params.radius(bin.shell()),
                };
            }
            phase = Phase::Done;
        }
        Self {
            config,
            tree,
            rng,
            layer: 1,
            phase,
            fed: 0,
            phi: DVector::zeros(d),
            scratch: Vec::new(),
        }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Feeds one record; `None` is the dummy record. Responses are clipped
    /// to `[-1, 1]` before anything else sees them.
    pub fn push(&mut self, sample: Option<(&DVector<f64>, f64)>) -> Result<Option<PhaseEvent>, CoreError> {
        if self.phase == Phase::Done {
            return Ok(None);
        }
        let d = self.config.params.dim();
        let routed = match sample {
            Some((phi, y)) if !is_dummy(phi) => {
                check_feature(phi, d)?;
                if y.is_nan() {
                    return Err(CoreError::invalid("y", "is NaN"));
                }
                self.phi.copy_from(phi);
                let mut y = y.clamp(-1.0, 1.0);
                let walk = walk(&self.tree, &mut self.phi, &mut y, self.layer);
                walk.bin.map(|bin| (bin, y.clamp(-1.0, 1.0), walk.parent_width))
            }
            _ => None,
        };
        match self.phase {
            Phase::Update => self.update_step(routed.map(|(bin, y, _)| (bin, y))),
            Phase::Confidence => self.confidence_step(routed.map(|(bin, _, w)| (bin, w))),
            Phase::Done => unreachable!(),
        }
        self.fed += 1;
        if self.fed < self.config.per_layer {
            return Ok(None);
        }
        self.fed = 0;
        let h = self.layer;
        match self.phase {
            Phase::Update => {
                fit_layer(&mut self.tree, h, self.config.per_layer)?;
                self.phase = Phase::Confidence;
                Ok(Some(PhaseEvent::UpdateClosed { layer: h }))
            }
            _ => {
                close_confidence(&mut self.tree, h, self.config.per_layer);
                if h < d {
                    self.tree.open_layer(h);
                    self.layer += 1;
                    self.phase = Phase::Update;
                } else {
                    self.phase = Phase::Done;
                }
                Ok(Some(PhaseEvent::LayerClosed { layer: h }))
            }
        }
    }

    fn update_step(&mut self, routed: Option<(usize, f64)>) {
        let params = self.config.params.clone();
        let private = self.config.noise.is_private();
        let bins = self.tree.layer_bins_mut(self.layer);
        for (idx, bin) in bins.iter_mut().enumerate() {
            if !bin.active {
                continue;
            }
            let data = match routed {
                Some((i, y)) if i == idx => Some((&self.phi, y)),
                _ => None,
            };
            update_bin(bin, data, &params, private, &mut self.rng, &mut self.scratch);
        }
    }

    fn confidence_step(&mut self, routed: Option<(usize, f64)>) {
        let params = self.config.params.clone();
        let private = self.config.noise.is_private();
        let alpha = params.budget().alpha();
        let bins = self.tree.layer_bins_mut(self.layer);
        for (idx, bin) in bins.iter_mut().enumerate() {
            if !bin.active {
                continue;
            }
            let root_s = math::sqrt(bin.eigenvalue);
            if let Some((i, parent_width)) = routed {
                if i == idx {
                    bin.ci_error_sum += parent_width * bin.direction.dot(&self.phi).abs() / root_s;
                }
            }
            if private {
                let scale = params.radius(bin.shell()) / (root_s * alpha);
                bin.ci_error_sum += laplace(scale, &mut self.rng);
            }
        }
    }

    /// Finished estimate; errors if the record budget was not reached.
    pub fn finish(self) -> Result<LplrEstimate, CoreError> {
        if self.phase != Phase::Done {
            return Err(CoreError::OracleIncomplete { layer: self.layer });
        }
        Ok(LplrEstimate { tree: self.tree })
    }
}

impl RegressionOracle for LplrOracle {
    fn feed(&mut self, sample: Option<(&DVector<f64>, f64)>) -> Result<(), CoreError> {
        self.push(sample).map(|_| ())
    }

    fn is_complete(&self) -> bool {
        LplrOracle::is_complete(self)
    }

    fn finalize(self: Box<Self>) -> Result<Box<dyn Estimate>, CoreError> {
        Ok(Box::new((*self).finish()?))
    }
}

/// Runs the oracle over a finite stream.
pub fn run_oracle<'a, I>(samples: I, config: OracleConfig, rng: StreamRng) -> Result<LplrEstimate, CoreError>
where
    I: IntoIterator<Item = Option<(&'a DVector<f64>, f64)>>,
{
    let needed = config.total_samples();
    let mut oracle = LplrOracle::new(config, rng);
    let mut received = 0;
    for s in samples {
        if oracle.is_complete() {
            break;
        }
        oracle.push(s)?;
        received += 1;
    }
    if !oracle.is_complete() {
        return Err(CoreError::StreamExhausted { needed, received });
    }
    oracle.finish()
}

/// Finished tree; predictions follow the fitted path of each feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LplrEstimate {
    tree: PartitionTree,
}

impl LplrEstimate {
    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn aggregate(&self, phi: &DVector<f64>) -> Prediction {
        if is_dummy(phi) {
            return Prediction {
                value: 0.0,
                width: 0.0,
            };
        }
        let (value, width) = self.walk(phi);
        // A saturated width carries no information, and only the centered
        // value is guaranteed to lie within it of every mean in [-1, 1].
        if width >= 1.0 {
            return Prediction {
                value: 0.0,
                width: 1.0,
            };
        }
        Prediction {
            value: value.clamp(-1.0, 1.0),
            width,
        }
    }

    /// Sum of the layer fits along the path of `phi`, before clamping or
    /// saturation.
    pub fn composed_value(&self, phi: &DVector<f64>) -> f64 {
        if is_dummy(phi) {
            return 0.0;
        }
        self.walk(phi).0
    }

    fn walk(&self, phi: &DVector<f64>) -> (f64, f64) {
        let params = self.tree.params();
        let d = params.dim();
        let mut phi = phi.clone();
        let mut value = 0.0;
        let mut width = 0.0;
        let mut idx = params.shell_index(phi.norm());
        let mut h = 1;
        loop {
            let bin = self.tree.bin(h, idx);
            width = bin_width(bin, &phi, width);
            if !bin.is_fitted() {
                break;
            }
            value += phi.dot(&bin.theta);
            if h == d || bin.children.is_empty() {
                break;
            }
            let along = bin.direction.dot(&phi);
            phi.axpy(-along, &bin.direction, 1.0);
            idx = bin.children[params.shell_index(phi.norm())];
            h += 1;
        }
        (value, width)
    }
}

impl Estimate for LplrEstimate {
    fn predict(&self, phi: &DVector<f64>) -> Prediction {
        self.aggregate(phi)
    }
}

struct Walk {
    bin: Option<usize>,
    parent_width: f64,
}

/// Moves `(phi, y)` to its layer-`target` residual and locates its bin.
fn walk(tree: &PartitionTree, phi: &mut DVector<f64>, y: &mut f64, target: usize) -> Walk {
    let params = tree.params();
    let mut idx = params.shell_index(phi.norm());
    let mut width = 0.0;
    for h in 1..target {
        let bin = tree.bin(h, idx);
        if bin.children.is_empty() {
            return Walk {
                bin: None,
                parent_width: width,
            };
        }
        width = bin_width(bin, phi, width);
        step_residual(bin, phi, y);
        idx = bin.children[params.shell_index(phi.norm())];
    }
    Walk {
        bin: Some(idx),
        parent_width: width,
    }
}

/// Confidence width of `bin` at the residual `phi` given the parent's width.
fn bin_width(bin: &BinNode, phi: &DVector<f64>, parent: f64) -> f64 {
    match bin.ci {
        CiState::Fitted { ci_const, error_bar } => {
            let spread = bin.direction.dot(phi).abs() / math::sqrt(bin.eigenvalue);
            (parent + ci_const + error_bar * spread).min(1.0)
        }
        CiState::Fallback { width } => (parent + width).min(1.0),
        CiState::Pending => parent,
    }
}

/// Adds one record's contribution, real or dummy, to a bin's statistics.
///
/// The layer-`h` residual must satisfy `‖phi_h‖ <= gamma^{-k}` for the bin's
/// shell `k`; records violating it are rejected.
pub fn lplr_update(
    bin: &mut BinNode,
    sample: Option<(&DVector<f64>, f64)>,
    params: &LayerParams,
    noise: NoiseMode,
    rng: &mut StreamRng,
) -> Result<(), CoreError> {
    if let Some((phi, y)) = sample {
        if phi.len() != params.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: params.dim(),
                found: phi.len(),
            });
        }
        let bound = params.radius(bin.shell());
        let norm = phi.norm();
        if !(norm <= bound * (1.0 + 1e-9)) {
            return Err(CoreError::NormOutOfRange { norm, bound });
        }
        if y.is_nan() {
            return Err(CoreError::invalid("y", "is NaN"));
        }
    }
    let sample = sample.map(|(phi, y)| (phi, y.clamp(-1.0, 1.0)));
    let mut scratch = Vec::new();
    update_bin(bin, sample, params, noise.is_private(), rng, &mut scratch);
    Ok(())
}

fn update_bin(
    bin: &mut BinNode,
    sample: Option<(&DVector<f64>, f64)>,
    params: &LayerParams,
    private: bool,
    rng: &mut StreamRng,
    scratch: &mut Vec<f64>,
) {
    let d = params.dim();
    if let Some((phi, y)) = sample {
        bin.count += 1.0;
        bin.cross_moment.axpy(y, phi, 1.0);
        for j in 0..d {
            for i in 0..d {
                bin.second_moment[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    if private {
        let budget = params.budget();
        let alpha = budget.alpha();
        let radius = params.radius(bin.shell());
        bin.count += laplace(3.0 / alpha, rng);
        let scale = 3.0 * math::sqrt(d as f64) * radius / alpha;
        for v in bin.cross_moment.iter_mut() {
            *v += laplace(scale, rng);
        }
        add_centered_wishart(&mut bin.second_moment, budget, 3.0 * radius * radius, rng, scratch);
    }
}

/// Projects the symmetric part of `raw` onto PSD matrices whose range is
/// orthogonal to the columns of `basis`: `P sym(raw) P` with negative
/// eigenvalues clipped, `P = I - U U^T`.
pub fn psd_project_orthogonal(raw: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>, CoreError> {
    let (values, vectors) = projected_spectrum(raw, basis, 0)?;
    let d = raw.nrows();
    let mut out = DMatrix::zeros(d, d);
    for (c, &l) in values.iter().enumerate() {
        if l > 0.0 {
            let v = vectors.column(c);
            out.ger(l, &v, &v, 1.0);
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// Eigen-decomposition of `P sym(raw) P` with negative eigenvalues clipped.
fn projected_spectrum(
    raw: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    layer: usize,
) -> Result<(DVector<f64>, DMatrix<f64>), CoreError> {
    let d = raw.nrows();
    if raw.ncols() != d {
        return Err(CoreError::DimensionMismatch {
            expected: d,
            found: raw.ncols(),
        });
    }
    let proj = orthogonal_complement(basis, d)?;
    let sym = (raw + raw.transpose()) * 0.5;
    let inner = &proj * sym * &proj;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or(CoreError::EigenSolverFailed { layer })?;
    let values = eig.eigenvalues.map(|l| l.max(0.0));
    Ok((values, eig.eigenvectors))
}

fn orthogonal_complement(basis: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>, CoreError> {
    if basis.ncols() == 0 {
        return Ok(DMatrix::identity(d, d));
    }
    if basis.nrows() != d {
        return Err(CoreError::DimensionMismatch {
            expected: d,
            found: basis.nrows(),
        });
    }
    let gram = basis.transpose() * basis;
    let deviation = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
    if !(deviation <= 1e-8) {
        return Err(CoreError::NotOrthonormal { deviation });
    }
    Ok(DMatrix::identity(d, d) - basis * basis.transpose())
}

/// Relative size, against the squared shell radius, below which a top
/// eigenvalue counts as zero. Dividing by anything smaller overflows.
const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Result of one bin's regression.
#[derive(Debug, Clone, PartialEq)]
pub struct PcrFit {
    pub direction: DVector<f64>,
    pub eigenvalue: f64,
    pub theta: DVector<f64>,
}

/// Activity threshold `kappa_1 gamma^2 (d+1)^3 / sqrt(n)` on the mass.
pub fn activity_threshold(params: &LayerParams, n: usize) -> f64 {
    let d1 = (params.dim() + 1) as f64;
    let g = params.gamma();
    params.kappas().activity * g * g * d1 * d1 * d1 / math::sqrt(n as f64)
}

/// Mass threshold `kappa_1' gamma d^{3/2} / sqrt(n)` for a fitted width.
pub fn ci_activity_threshold(params: &LayerParams, n: usize) -> f64 {
    let d = params.dim() as f64;
    params.kappas().ci_activity * params.gamma() * d * math::sqrt(d) / math::sqrt(n as f64)
}

/// Principal component regression of one bin on its statistics.
///
/// Returns `None` when the bin is inactive, its mass is at or below the
/// activity threshold, it sits in the innermost shell, or the projected
/// second moment has no eigenvalue clearly above zero.
pub fn lplr_pcr(
    bin: &BinNode,
    n: usize,
    ancestors: &DMatrix<f64>,
    params: &LayerParams,
    layer: usize,
) -> Result<Option<PcrFit>, CoreError> {
    let mass = bin.count / n as f64;
    if !bin.active || !(mass > activity_threshold(params, n)) || bin.shell() == params.levels() {
        return Ok(None);
    }
    let denom = mass * n as f64;
    let raw = bin.second_moment.map(|v| v / denom);
    let (values, vectors) = projected_spectrum(&raw, ancestors, layer)?;
    let top = values.imax();
    let eigenvalue = values[top];
    let radius = params.radius(bin.shell());
    if !(eigenvalue > EIGENVALUE_FLOOR * radius * radius) {
        return Ok(None);
    }
    let mut direction = vectors.column(top).into_owned();
    if ancestors.ncols() > 0 {
        let along = ancestors.transpose() * &direction;
        direction -= ancestors * along;
        let norm = direction.norm();
        direction /= norm;
    }
    if let Some(first) = direction.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            direction.neg_mut();
        }
    }
    let coef = (direction.dot(&bin.cross_moment) / denom) / eigenvalue;
    if !coef.is_finite() {
        return Ok(None);
    }
    let theta = &direction * coef;
    Ok(Some(PcrFit {
        direction,
        eigenvalue,
        theta,
    }))
}

/// Directions of the ancestors of bin `idx` at layer `h`, as columns.
pub fn ancestor_basis(tree: &PartitionTree, h: usize, idx: usize) -> DMatrix<f64> {
    let d = tree.params().dim();
    let mut cols = Vec::new();
    let mut parent = tree.bin(h, idx).parent;
    let mut layer = h;
    while let Some(p) = parent {
        layer -= 1;
        let bin = tree.bin(layer, p);
        cols.push(bin.direction.clone());
        parent = bin.parent;
    }
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn fit_layer(tree: &mut PartitionTree, h: usize, n: usize) -> Result<(), CoreError> {
    let params = tree.params().clone();
    let count = tree.layer_bins(h).len();
    for idx in 0..count {
        let basis = ancestor_basis(tree, h, idx);
        let fit = {
            let bin = tree.bin(h, idx);
            lplr_pcr(bin, n, &basis, &params, h)?
        };
        let bin = &mut tree.layer_bins_mut(h)[idx];
        bin.mass = bin.count / n as f64;
        match fit {
            Some(fit) => {
                bin.direction = fit.direction;
                bin.eigenvalue = fit.eigenvalue;
                bin.theta = fit.theta;
            }
            None => {
                bin.active = false;
                bin.clear_fit();
            }
        }
    }
    Ok(())
}

fn close_confidence(tree: &mut PartitionTree, h: usize, n: usize) {
    let params = tree.params().clone();
    let kappas = *params.kappas();
    let d = params.dim() as f64;
    let g = params.gamma();
    let root_n = math::sqrt(n as f64);
    let floor = ci_activity_threshold(&params, n);
    for bin in tree.layer_bins_mut(h) {
        if !bin.active || !(bin.mass > floor) {
            bin.active = false;
            bin.clear_fit();
            bin.ci = CiState::Fallback {
                width: params.radius(bin.shell()),
            };
            continue;
        }
        let denom = bin.mass * n as f64;
        let correction = kappas.ci_correction * g * d * math::sqrt(d) / (bin.mass * root_n);
        let error_bar = (bin.ci_error_sum / denom + correction).max(0.0);
        let d1 = d + 1.0;
        let ci_const = kappas.ci_width * g * g * (d1 * d1) * (d1 * d1) / (bin.mass * root_n);
        if !(error_bar.is_finite() && ci_const.is_finite()) {
            bin.active = false;
            bin.clear_fit();
            bin.ci = CiState::Fallback {
                width: params.radius(bin.shell()),
            };
            continue;
        }
        bin.ci = CiState::Fitted { ci_const, error_bar };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::PrivacyBudget;
    use crate::partition::{BinAddress, Kappas};
    use crate::rng::{Channel, StreamKey};

    fn params(dim: usize) -> LayerParams {
        LayerParams::new(
            dim,
            1024,
            0.1,
            PrivacyBudget::new(1.0).unwrap(),
            0.05,
            Kappas::desk_scale(),
            false,
        )
        .unwrap()
    }

    fn loose_params(dim: usize) -> LayerParams {
        let kappas = Kappas {
            activity: 1e-6,
            ..Kappas::desk_scale()
        };
        let b = PrivacyBudget::new(1.0).unwrap();
        LayerParams::new(dim, 1024, 0.1, b, 0.05, kappas, false).unwrap()
    }

    fn rng() -> StreamRng {
        StreamKey::new(5, 0, Channel::OracleNoise).rng()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn root_bin(p: &LayerParams, k: usize) -> BinNode {
        PartitionTree::new(p.clone()).layer_bins(1)[k].clone()
    }

    #[test]
    fn dummy_update_without_noise_is_identity() {
        let p = params(2);
        let mut bin = root_bin(&p, 0);
        let before = bin.clone();
        lplr_update(&mut bin, None, &p, NoiseMode::Off, &mut rng()).unwrap();
        assert_eq!(bin, before);
    }

    #[test]
    fn real_update_without_noise_is_exact() {
        let p = params(2);
        let mut bin = root_bin(&p, 0);
        let phi = v(&[0.6, -0.7]);
        lplr_update(&mut bin, Some((&phi, 0.4)), &p, NoiseMode::Off, &mut rng()).unwrap();
        assert_eq!(bin.count, 1.0);
        assert_eq!(bin.cross_moment, &phi * 0.4);
        assert_eq!(bin.second_moment, &phi * phi.transpose());
    }

    #[test]
    fn update_rejects_out_of_shell_residual() {
        let p = params(2);
        let mut bin = root_bin(&p, 2);
        let phi = v(&[0.6, 0.0]);
        assert!(lplr_update(&mut bin, Some((&phi, 0.0)), &p, NoiseMode::Off, &mut rng()).is_err());
    }

    #[test]
    fn dummy_updates_concentrate_count_near_zero() {
        // count/n after n dummy records is a mean of 3 Lap(1) draws, sd
        // 3 sqrt(2/n) = 0.0424 at n = 10^4. The central 99% band is
        // +-2.576 sd = +-0.109; +-0.05 covers only about 76%.
        let p = params(1);
        let n = 10_000;
        let reps = 1000;
        let (mut tight, mut wide) = (0, 0);
        let mut r = rng();
        for _ in 0..reps {
            let mut bin = root_bin(&p, 0);
            for _ in 0..n {
                lplr_update(&mut bin, None, &p, NoiseMode::Private, &mut r).unwrap();
            }
            let m = (bin.count / n as f64).abs();
            tight += (m <= 0.05) as usize;
            wide += (m <= 0.11) as usize;
        }
        assert!(wide >= 985, "{wide}/{reps}");
        let frac = tight as f64 / reps as f64;
        assert!((frac - 0.762).abs() <= 0.045, "{frac}");
    }

    #[test]
    fn projection_examples() {
        let empty = DMatrix::zeros(2, 0);
        let m = DMatrix::from_diagonal(&v(&[1.0, -1.0]));
        let out = psd_project_orthogonal(&m, &empty).unwrap();
        assert!((out - DMatrix::from_diagonal(&v(&[1.0, 0.0]))).amax() < 1e-12);

        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let out = psd_project_orthogonal(&DMatrix::identity(2, 2), &e1).unwrap();
        assert!((out - DMatrix::from_diagonal(&v(&[0.0, 1.0]))).amax() < 1e-12);

        let fixed = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 2.0, 0.5, 0.0, 0.5, 1.0]);
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let out = psd_project_orthogonal(&fixed, &e1).unwrap();
        assert!((out - fixed).amax() < 1e-10);

        let bad = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(
            psd_project_orthogonal(&DMatrix::identity(2, 2), &bad),
            Err(CoreError::NotOrthonormal { .. })
        ));
    }

    fn bin_with(p: &LayerParams, samples: &[(DVector<f64>, f64)]) -> BinNode {
        let mut bin = root_bin(p, 0);
        for (phi, y) in samples {
            lplr_update(&mut bin, Some((phi, *y)), p, NoiseMode::Off, &mut rng()).unwrap();
        }
        bin
    }

    #[test]
    fn pcr_on_rank_one_data() {
        let p = loose_params(2);
        let samples: Vec<_> = [0.9, -0.8, 0.7, 1.0]
            .iter()
            .map(|&a| (v(&[a, 0.0]), 0.7 * a))
            .collect();
        let bin = bin_with(&p, &samples);
        let fit = lplr_pcr(&bin, 4, &DMatrix::zeros(2, 0), &p, 1).unwrap().unwrap();
        assert_eq!(fit.direction, v(&[1.0, 0.0]));
        let avg_sq = (0.81 + 0.64 + 0.49 + 1.0) / 4.0;
        assert!((fit.eigenvalue - avg_sq).abs() < 1e-12);
        assert!((fit.theta - v(&[0.7, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn pcr_respects_ancestors() {
        let p = loose_params(2);
        let samples = alloc::vec![(v(&[0.9, 0.3]), 0.1), (v(&[0.8, -0.5]), 0.2), (v(&[-0.9, 0.2]), -0.3)];
        let bin = bin_with(&p, &samples);
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let fit = lplr_pcr(&bin, 3, &e1, &p, 2).unwrap().unwrap();
        assert_eq!(fit.direction, v(&[0.0, 1.0]));
        // s = mean of squared second coordinates.
        let s = (0.09 + 0.25 + 0.04) / 3.0;
        assert!((fit.eigenvalue - s).abs() < 1e-12);
    }

    #[test]
    fn pcr_threshold_branch() {
        let p = params(2);
        let bin = bin_with(&p, &[(v(&[0.9, 0.0]), 0.5)]);
        // One record out of 10^6 is far below the activity threshold.
        assert_eq!(lplr_pcr(&bin, 1_000_000, &DMatrix::zeros(2, 0), &p, 1).unwrap(), None);
        let mut inner = root_bin(&p, p.levels());
        inner.count = 100.0;
        assert_eq!(lplr_pcr(&inner, 100, &DMatrix::zeros(2, 0), &p, 1).unwrap(), None);
    }

    fn noiseless_config(dim: usize, n: usize) -> OracleConfig {
        OracleConfig::new(params(dim), n, NoiseMode::Off).unwrap()
    }

    #[test]
    fn zero_batch_oracle_is_all_fallback() {
        let est = run_oracle(core::iter::empty(), noiseless_config(2, 0), rng()).unwrap();
        let p = est.tree().params().clone();
        let phi = v(&[0.3, 0.0]);
        let pred = est.aggregate(&phi);
        assert_eq!(pred.value, 0.0);
        assert_eq!(pred.width, p.radius(p.shell_index(0.3)));
        assert_eq!(est.aggregate(&DVector::zeros(2)), Prediction { value: 0.0, width: 0.0 });
    }

    #[test]
    fn dummy_stream_leaves_everything_inactive() {
        let config = OracleConfig::new(params(2), 500, NoiseMode::Private).unwrap();
        let est = run_oracle(core::iter::repeat_n(None, 2000), config, rng()).unwrap();
        for b in est.tree().layer_bins(1) {
            assert!(!b.is_fitted());
        }
        let pred = est.aggregate(&v(&[0.6, 0.6]));
        assert_eq!(pred.value, 0.0);
        assert_eq!(pred.width, 1.0);
    }

    #[test]
    fn exhausted_stream_is_an_error() {
        let err = run_oracle(core::iter::repeat_n(None, 10), noiseless_config(2, 8), rng());
        assert_eq!(err.unwrap_err(), CoreError::StreamExhausted { needed: 32, received: 10 });
    }

    #[test]
    fn noiseless_two_point_design_is_exact() {
        // Two features (1, +-s)/norm with equal weight: both layers see full
        // mass and the composed fit recovers theta exactly.
        let s = 0.3;
        let norm = (1.0f64 + s * s).sqrt();
        let a = v(&[1.0 / norm, s / norm]);
        let b = v(&[1.0 / norm, -s / norm]);
        let theta = v(&[0.4, -0.5]);
        let n = 1 << 14;
        let stream: Vec<_> = (0..4 * n)
            .map(|i| {
                let phi = if i % 2 == 0 { &a } else { &b };
                (phi.clone(), phi.dot(&theta))
            })
            .collect();
        let est = run_oracle(
            stream.iter().map(|(p, y)| Some((p, *y))),
            noiseless_config(2, n),
            rng(),
        )
        .unwrap();
        for phi in [&a, &b] {
            let pred = est.aggregate(phi);
            assert!(pred.width < 1.0);
            assert!((pred.value - phi.dot(&theta)).abs() <= 1e-12);
        }
        for bin in est.tree().layer_bins(1).iter().filter(|b| b.is_fitted()) {
            let aligned = &bin.direction * bin.direction.dot(&bin.theta);
            assert_eq!(aligned, bin.theta);
        }
    }

    #[test]
    fn widths_never_exceed_one() {
        let config = OracleConfig::new(params(2), 256, NoiseMode::Private).unwrap();
        let a = v(&[0.8, 0.3]);
        let stream: Vec<_> = (0..1024).map(|_| (a.clone(), 0.5)).collect();
        let est = run_oracle(stream.iter().map(|(p, y)| Some((p, *y))), config, rng()).unwrap();
        for i in 0..50 {
            let t = i as f64 * 0.12;
            let phi = v(&[t.cos() * 0.9, t.sin() * 0.9]);
            let w = est.aggregate(&phi).width;
            assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn fallback_width_at_first_layer_is_shell_radius() {
        let mut tree = PartitionTree::new(params(2));
        let mut bin = tree.layer_bins(1)[1].clone();
        bin.active = false;
        tree.layer_bins_mut(1)[1] = bin;
        close_confidence(&mut tree, 1, 100);
        let r = tree.params().radius(1);
        assert_eq!(tree.bin(1, 1).ci, CiState::Fallback { width: r });
        assert_eq!(tree.bin(1, 1).address, BinAddress::root(1));
    }
}
