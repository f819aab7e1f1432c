//! Layered shell partition of the unit ball.
//!
//! Layer `h` splits the residual feature `phi_h` by its norm into shells
//! `(r_{k+1}, r_k]` with `r_k = gamma^{-k}`, `k = 0..M`; the innermost index
//! `M` collects everything with `‖phi_h‖ <= gamma^{-M}`. A layer-`h` bin is
//! addressed by the shell indices `(k_1, ..., k_h)` seen along the way. Once
//! a bin has a fitted direction `u` and coefficient `theta`, samples in it
//! continue to layer `h + 1` with
//!
//! ```text
//! phi_{h+1} = (I - u u^T) phi_h        y_{h+1} = y_h - <phi_h, theta>
//! ```

use alloc::string::ToString;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;
use crate::math;
use crate::mechanisms::PrivacyBudget;

/// Tuning constants of the activity and confidence thresholds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Kappas {
    /// Mass threshold for fitting a bin.
    pub activity: f64,
    /// Mass threshold for issuing a fitted confidence width.
    pub ci_activity: f64,
    /// Weight of the sampling correction in the accrued error bar.
    pub ci_correction: f64,
    /// Weight of the constant term of the confidence width.
    pub ci_width: f64,
}

impl Kappas {
    /// Smallest constants for which the concentration arguments go through.
    pub fn proven_minimum(dim: usize, alpha: f64, beta: f64, delta: f64) -> Self {
        let d = dim as f64;
        let l48 = math::ln(48.0 * d / (beta * delta)) / alpha;
        let l24 = math::ln(24.0 * d / (beta * delta)) / alpha;
        Self {
            activity: 43.0 * l48,
            ci_activity: 15.0 * l48,
            ci_correction: 118.0 * l24,
            ci_width: 300.0 * l48,
        }
    }

    /// Constants sized for simulations with per-layer batches of `2^10` to
    /// `2^17` samples. With the minimum constants every bin stays inactive
    /// until `n` is in the billions.
    pub fn desk_scale() -> Self {
        Self {
            activity: 0.05,
            ci_activity: 0.05,
            ci_correction: 4.0,
            ci_width: 0.01,
        }
    }

    fn validate(&self) -> Result<(), CoreError> {
        for (name, v) in [
            ("kappa.activity", self.activity),
            ("kappa.ci_activity", self.ci_activity),
            ("kappa.ci_correction", self.ci_correction),
            ("kappa.ci_width", self.ci_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::invalid(name, "must be positive and finite"));
            }
        }
        Ok(())
    }

    fn dominates(&self, other: &Self) -> bool {
        self.activity >= other.activity
            && self.ci_activity >= other.ci_activity
            && self.ci_correction >= other.ci_correction
            && self.ci_width >= other.ci_width
    }
}

/// Geometry and thresholds shared by every layer of one oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    dim: usize,
    horizon: u64,
    beta: f64,
    gamma: f64,
    levels: usize,
    budget: PrivacyBudget,
    delta: f64,
    kappas: Kappas,
    strict_constants: bool,
    radii: Vec<f64>,
}

impl LayerParams {
    /// `gamma = horizon^beta` must be at least 2 and `M = ceil(1/(2 beta))`.
    /// In strict-constants mode the constants must dominate
    /// [`Kappas::proven_minimum`].
    pub fn new(
        dim: usize,
        horizon: u64,
        beta: f64,
        budget: PrivacyBudget,
        delta: f64,
        kappas: Kappas,
        strict_constants: bool,
    ) -> Result<Self, CoreError> {
        if dim == 0 {
            return Err(CoreError::invalid("dim", "must be at least 1"));
        }
        if !(beta > 0.0 && beta <= 0.5) {
            return Err(CoreError::invalid("beta", "must lie in (0, 1/2]"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CoreError::invalid("delta", "must lie in (0, 1)"));
        }
        kappas.validate()?;
        let gamma = math::powf(horizon as f64, beta);
        if gamma < 2.0 - 1e-9 {
            return Err(CoreError::InvalidParameter {
                name: "gamma",
                reason: alloc::format!("horizon^beta = {gamma} is below 2"),
            });
        }
        let levels = math::ceil(1.0 / (2.0 * beta) - 1e-9) as usize;
        if levels >= u16::MAX as usize {
            return Err(CoreError::invalid("beta", "too small"));
        }
        if strict_constants {
            let floor = Kappas::proven_minimum(dim, budget.alpha(), beta, delta);
            if !kappas.dominates(&floor) {
                return Err(CoreError::InvalidParameter {
                    name: "kappas",
                    reason: alloc::format!("below the strict-constants minimum {floor:?}"),
                });
            }
        }
        let radii = (0..=levels).map(|k| math::powi(gamma, -(k as i32))).collect();
        Ok(Self {
            dim,
            horizon,
            beta,
            gamma,
            levels,
            budget,
            delta,
            kappas,
            strict_constants,
            radii,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn horizon(&self) -> u64 {
        self.horizon
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    /// Largest shell index `M`.
    pub fn levels(&self) -> usize {
        self.levels
    }
    pub fn budget(&self) -> PrivacyBudget {
        self.budget
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn kappas(&self) -> &Kappas {
        &self.kappas
    }
    pub fn strict_constants(&self) -> bool {
        self.strict_constants
    }

    /// `gamma^{-k}`.
    pub fn radius(&self, k: usize) -> f64 {
        self.radii[k]
    }

    /// Largest `k <= M` with `norm <= gamma^{-k}`; ties go to the larger `k`.
    pub fn shell_index(&self, norm: f64) -> usize {
        let mut k = 0;
        while k < self.levels && norm <= self.radii[k + 1] {
            k += 1;
        }
        k
    }
}

/// Shell indices `(k_1, ..., k_h)` of a bin.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct BinAddress(Vec<u16>);

impl BinAddress {
    pub fn root(k: usize) -> Self {
        Self(alloc::vec![k as u16])
    }

    pub fn from_indices(ks: &[usize]) -> Self {
        Self(ks.iter().map(|&k| k as u16).collect())
    }

    pub fn ks(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&k| k as usize)
    }

    pub fn layer(&self) -> usize {
        self.0.len()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("addresses are never empty") as usize
    }

    pub fn is_partitioning(&self, levels: usize) -> bool {
        self.0.iter().all(|&k| (k as usize) < levels)
    }
}

/// Address of the `k`-th child of `parent`.
pub fn child_address(parent: &BinAddress, k: usize, levels: usize) -> Result<BinAddress, CoreError> {
    if !parent.is_partitioning(levels) {
        return Err(CoreError::NonPartitioningBin);
    }
    if k > levels {
        return Err(CoreError::invalid("k", "exceeds the largest shell index"));
    }
    let mut ks = parent.0.clone();
    ks.push(k as u16);
    Ok(BinAddress(ks))
}

/// Confidence state of a bin after the confidence pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CiState {
    Pending,
    /// Width `gamma^{-k}` added to the parent's width.
    Fallback { width: f64 },
    Fitted {
        /// Constant part of the width.
        ci_const: f64,
        /// Coefficient of `|u^T phi| / sqrt(s)`.
        error_bar: f64,
    },
}

/// One bin with its privatized statistics and fitted quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct BinNode {
    pub address: BinAddress,
    pub parent: Option<usize>,
    /// Indices of the children in the next layer, ordered by shell index.
    pub children: Vec<usize>,
    pub active: bool,
    /// Noisy sample count.
    pub count: f64,
    /// Noisy `sum y_h phi_h`.
    pub cross_moment: DVector<f64>,
    /// Noisy `sum phi_h phi_h^T`.
    pub second_moment: DMatrix<f64>,
    /// Estimated probability mass `count / n`.
    pub mass: f64,
    /// Fitted principal direction (zero if not fitted).
    pub direction: DVector<f64>,
    /// Top eigenvalue paired with `direction` (zero if not fitted).
    pub eigenvalue: f64,
    /// Coefficient along `direction`.
    pub theta: DVector<f64>,
    /// Noisy sum of propagated parent errors.
    pub ci_error_sum: f64,
    pub ci: CiState,
}

impl BinNode {
    fn new(address: BinAddress, parent: Option<usize>, dim: usize, active: bool) -> Self {
        Self {
            address,
            parent,
            children: Vec::new(),
            active,
            count: 0.0,
            cross_moment: DVector::zeros(dim),
            second_moment: DMatrix::zeros(dim, dim),
            mass: 0.0,
            direction: DVector::zeros(dim),
            eigenvalue: 0.0,
            theta: DVector::zeros(dim),
            ci_error_sum: 0.0,
            ci: CiState::Pending,
        }
    }

    pub fn shell(&self) -> usize {
        self.address.last()
    }

    pub fn is_fitted(&self) -> bool {
        matches!(self.ci, CiState::Fitted { .. })
    }

    pub(crate) fn clear_fit(&mut self) {
        self.direction.fill(0.0);
        self.eigenvalue = 0.0;
        self.theta.fill(0.0);
    }
}

/// Per-layer view of a routed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// Bin index in its layer, `None` once the path left the fitted tree.
    pub bin: Option<usize>,
    pub k: usize,
    pub phi: DVector<f64>,
    /// Response the bin sees, clipped to `[-1, 1]`.
    pub y: f64,
}

impl LayerRecord {
    pub fn live(&self) -> bool {
        self.bin.is_some()
    }
}

/// The layered bin tree of one oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTree {
    params: LayerParams,
    layers: Vec<Vec<BinNode>>,
}

impl PartitionTree {
    /// Fresh tree with the `M + 1` first-layer bins.
    pub fn new(params: LayerParams) -> Self {
        let d = params.dim();
        let first = (0..=params.levels())
            .map(|k| BinNode::new(BinAddress::root(k), None, d, true))
            .collect();
        let mut layers = Vec::with_capacity(d);
        layers.push(first);
        Self { params, layers }
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    /// Number of materialized layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Bins of layer `h` (1-based).
    pub fn layer_bins(&self, h: usize) -> &[BinNode] {
        self.layers.get(h.wrapping_sub(1)).map_or(&[], |l| l.as_slice())
    }

    pub(crate) fn layer_bins_mut(&mut self, h: usize) -> &mut [BinNode] {
        &mut self.layers[h - 1]
    }

    pub fn bin(&self, h: usize, idx: usize) -> &BinNode {
        &self.layers[h - 1][idx]
    }

    /// Creates layer `h + 1` with `M + 1` children under every fitted bin of
    /// layer `h`. Children of unfitted bins are never materialized.
    pub(crate) fn open_layer(&mut self, h: usize) {
        debug_assert_eq!(self.layers.len(), h);
        let d = self.params.dim();
        let levels = self.params.levels();
        let mut next = Vec::new();
        for (idx, bin) in self.layers[h - 1].iter_mut().enumerate() {
            if !bin.is_fitted() {
                continue;
            }
            for k in 0..=levels {
                let address =
                    child_address(&bin.address, k, levels).expect("fitted bins are partitioning");
                bin.children.push(next.len());
                next.push(BinNode::new(address, Some(idx), d, true));
            }
        }
        self.layers.push(next);
    }

    /// Full per-layer routing of `(phi, y)` through the first `depth` layers.
    pub fn route(&self, phi: &DVector<f64>, y: f64, depth: usize) -> Result<Vec<LayerRecord>, CoreError> {
        check_feature(phi, self.params.dim())?;
        if depth == 0 || depth > self.params.dim() {
            return Err(CoreError::invalid("depth", "must lie in 1..=dim"));
        }
        let mut phi = phi.clone();
        let mut y = y;
        let mut records = Vec::with_capacity(depth);
        let mut idx = Some(self.params.shell_index(phi.norm()));
        for h in 1..=depth {
            let k = self.params.shell_index(phi.norm());
            if h > 1 {
                idx = idx.and_then(|p| {
                    let parent = self.layers.get(h - 2).map(|l| &l[p])?;
                    parent.children.get(k).copied()
                });
            }
            records.push(LayerRecord {
                bin: idx,
                k,
                phi: phi.clone(),
                y: y.clamp(-1.0, 1.0),
            });
            if let Some(i) = idx {
                if let Some(bin) = self.layers.get(h - 1).map(|l| &l[i]) {
                    if !bin.children.is_empty() {
                        step_residual(bin, &mut phi, &mut y);
                    }
                }
            }
        }
        Ok(records)
    }

    /// Plain-data copy for JSON dumps.
    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            dim: self.params.dim(),
            gamma: self.params.gamma(),
            levels: self.params.levels(),
            layers: self
                .layers
                .iter()
                .map(|layer| layer.iter().map(BinSnapshot::from).collect())
                .collect(),
        }
    }
}

#[inline]
pub(crate) fn step_residual(bin: &BinNode, phi: &mut DVector<f64>, y: &mut f64) {
    *y -= phi.dot(&bin.theta);
    let along = bin.direction.dot(phi);
    phi.axpy(-along, &bin.direction, 1.0);
}

pub(crate) fn check_feature(phi: &DVector<f64>, dim: usize) -> Result<(), CoreError> {
    if phi.len() != dim {
        return Err(CoreError::DimensionMismatch {
            expected: dim,
            found: phi.len(),
        });
    }
    let norm = phi.norm();
    if !(norm <= 1.0 + 1e-9) {
        return Err(CoreError::NormOutOfRange { norm, bound: 1.0 });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinSnapshot {
    pub address: Vec<u16>,
    pub active: bool,
    pub count: f64,
    pub mass: f64,
    pub cross_moment: Vec<f64>,
    /// Row-major.
    pub second_moment: Vec<f64>,
    pub direction: Vec<f64>,
    pub eigenvalue: f64,
    pub theta: Vec<f64>,
    pub ci_error_sum: f64,
    /// `pending`, `fallback` or `fitted`.
    pub ci: alloc::string::String,
    pub ci_const: f64,
    pub error_bar: f64,
}

impl From<&BinNode> for BinSnapshot {
    fn from(b: &BinNode) -> Self {
        let (ci, ci_const, error_bar) = match b.ci {
            CiState::Pending => ("pending", 0.0, 0.0),
            CiState::Fallback { width } => ("fallback", width, 0.0),
            CiState::Fitted { ci_const, error_bar } => ("fitted", ci_const, error_bar),
        };
        Self {
            address: b.address.0.clone(),
            active: b.active,
            count: b.count,
            mass: b.mass,
            cross_moment: b.cross_moment.iter().copied().collect(),
            second_moment: b.second_moment.transpose().iter().copied().collect(),
            direction: b.direction.iter().copied().collect(),
            eigenvalue: b.eigenvalue,
            theta: b.theta.iter().copied().collect(),
            ci_error_sum: b.ci_error_sum,
            ci: ci.to_string(),
            ci_const,
            error_bar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreeSnapshot {
    pub dim: usize,
    pub gamma: f64,
    pub levels: usize,
    pub layers: Vec<Vec<BinSnapshot>>,
}
