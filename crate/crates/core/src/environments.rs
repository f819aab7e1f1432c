//! Synthetic linear contextual bandits and fixed two-point designs.

use alloc::vec::Vec;
use nalgebra::DVector;
use rand::Rng;

use crate::error::CoreError;
use crate::math;

const NORM_SLACK: f64 = 1e-12;

/// How a realized reward scatters around its mean `phi^T theta`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardNoise {
    /// The reward equals its mean.
    None,
    /// `+1` with probability `(1 + mean) / 2`, else `-1`.
    #[default]
    Bernoulli,
    /// `mean + U(-half_width, half_width)`, clamped to `[-1, 1]`.
    Uniform { half_width: f64 },
}

/// One realized reward; `clamped` marks draws that left `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reward {
    pub value: f64,
    pub clamped: bool,
}

impl RewardNoise {
    pub fn realize<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> Reward {
        match *self {
            RewardNoise::None => clamp_reward(mean),
            RewardNoise::Bernoulli => {
                let p = (1.0 + mean.clamp(-1.0, 1.0)) / 2.0;
                let value = if rng.random::<f64>() < p { 1.0 } else { -1.0 };
                Reward {
                    value,
                    clamped: false,
                }
            }
            RewardNoise::Uniform { half_width } => {
                let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
                clamp_reward(mean + half_width * u)
            }
        }
    }
}

fn clamp_reward(v: f64) -> Reward {
    let value = v.clamp(-1.0, 1.0);
    Reward {
        value,
        clamped: value != v,
    }
}

/// Finite categorical distribution sampled by inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self, CoreError> {
        if probs.is_empty() {
            return Err(CoreError::invalid("probs", "empty"));
        }
        if probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(CoreError::invalid("probs", "entries must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::invalid("probs", "must sum to one"));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { probs, cumulative })
    }

    pub fn uniform(n: usize) -> Result<Self, CoreError> {
        Self::new(alloc::vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        let idx = self.cumulative.partition_point(|&c| c <= u);
        // Skip zero-probability atoms that share a cumulative value.
        idx.min(self.probs.len() - 1)
    }
}

/// Feature distribution with finitely many atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDesign {
    atoms: Vec<DVector<f64>>,
    law: Categorical,
}

impl DiscreteDesign {
    pub fn new(atoms: Vec<DVector<f64>>, probs: Vec<f64>) -> Result<Self, CoreError> {
        if atoms.len() != probs.len() {
            return Err(CoreError::DimensionMismatch {
                expected: atoms.len(),
                found: probs.len(),
            });
        }
        let dim = atoms.first().map_or(0, |a| a.len());
        if dim == 0 {
            return Err(CoreError::invalid("atoms", "need at least one nonempty atom"));
        }
        for a in &atoms {
            if a.len() != dim {
                return Err(CoreError::DimensionMismatch {
                    expected: dim,
                    found: a.len(),
                });
            }
            let norm = a.norm();
            if norm > 1.0 + NORM_SLACK {
                return Err(CoreError::NormOutOfRange { norm, bound: 1.0 });
            }
        }
        Ok(Self {
            atoms,
            law: Categorical::new(probs)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        self.law.probs()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &DVector<f64> {
        &self.atoms[self.law.sample(rng)]
    }

    /// `E[g(phi)]` computed exactly over the atoms.
    pub fn expect(&self, mut g: impl FnMut(&DVector<f64>) -> f64) -> f64 {
        self.atoms
            .iter()
            .zip(self.law.probs())
            .map(|(a, p)| p * g(a))
            .sum()
    }

    /// `E[phi phi^T]`.
    pub fn second_moment(&self) -> nalgebra::DMatrix<f64> {
        let d = self.dim();
        let mut m = nalgebra::DMatrix::zeros(d, d);
        for (a, p) in self.atoms.iter().zip(self.law.probs()) {
            m.ger(*p, a, a, 1.0);
        }
        m
    }

    /// I.i.d. `(phi, y)` pairs with `y = phi^T theta` plus reward noise.
    pub fn stream<'a, R: Rng>(
        &'a self,
        theta: &'a DVector<f64>,
        noise: RewardNoise,
        rng: &'a mut R,
    ) -> impl Iterator<Item = (DVector<f64>, f64)> + 'a {
        core::iter::from_fn(move || {
            let phi = self.sample(rng).clone();
            let y = noise.realize(phi.dot(theta), rng).value;
            Some((phi, y))
        })
    }
}

/// The two-point constructions used by the estimation lower bounds and the
/// partition illustration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardDesignKind {
    /// `e_1` w.p. `1 - c/sqrt(n)`, `e_2` w.p. `c/sqrt(n)`,
    /// `c = 1/(4 sqrt(2) (e^alpha - 1))`.
    MseFloor,
    /// `(1/2, +-0.07 n^{-1/3})` each w.p. 1/2.
    MadFloor,
    /// `e_1` w.p. `1 - delta`, `e_2` w.p. `delta`.
    Case1,
    /// `(1, +-sqrt(delta)) / sqrt(1 + delta)` each w.p. 1/2.
    Case2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardDesign {
    pub kind: HardDesignKind,
    pub n: u64,
    pub alpha: f64,
    /// Mixing parameter of the two partition cases.
    pub delta: f64,
}

impl HardDesign {
    /// `delta` defaults to `1/sqrt(n)`.
    pub fn new(kind: HardDesignKind, n: u64, alpha: f64) -> Result<Self, CoreError> {
        if n == 0 {
            return Err(CoreError::invalid("n", "must be positive"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CoreError::invalid("alpha", "must be positive"));
        }
        Ok(Self {
            kind,
            n,
            alpha,
            delta: 1.0 / math::sqrt(n as f64),
        })
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self, CoreError> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(CoreError::invalid("delta", "must lie in [0, 1]"));
        }
        self.delta = delta;
        Ok(self)
    }

    /// Construction constant `c`.
    pub fn constant(&self) -> f64 {
        match self.kind {
            HardDesignKind::MseFloor => 1.0 / (4.0 * core::f64::consts::SQRT_2 * (math::exp(self.alpha) - 1.0)),
            HardDesignKind::MadFloor => 0.07,
            HardDesignKind::Case1 | HardDesignKind::Case2 => 0.0,
        }
    }

    pub fn design(&self) -> DiscreteDesign {
        let n = self.n as f64;
        let (atoms, probs) = match self.kind {
            HardDesignKind::MseFloor => {
                let p = (self.constant() / math::sqrt(n)).min(1.0);
                (alloc::vec![e(0), e(1)], alloc::vec![1.0 - p, p])
            }
            HardDesignKind::MadFloor => {
                let s = self.constant() * math::powf(n, -1.0 / 3.0);
                (alloc::vec![pair(0.5, s), pair(0.5, -s)], alloc::vec![0.5, 0.5])
            }
            HardDesignKind::Case1 => (alloc::vec![e(0), e(1)], alloc::vec![1.0 - self.delta, self.delta]),
            HardDesignKind::Case2 => {
                let r = math::sqrt(self.delta);
                let norm = math::sqrt(1.0 + self.delta);
                (
                    alloc::vec![pair(1.0 / norm, r / norm), pair(1.0 / norm, -r / norm)],
                    alloc::vec![0.5, 0.5],
                )
            }
        };
        DiscreteDesign::new(atoms, probs).expect("hard designs lie in the unit ball")
    }

    /// The pair of parameters the construction cannot tell apart.
    pub fn hypotheses(&self) -> [DVector<f64>; 2] {
        match self.kind {
            HardDesignKind::MseFloor => [pair(0.0, 0.0), pair(0.0, 1.0)],
            HardDesignKind::MadFloor => [pair(0.5, 0.0), pair(0.5, 0.5)],
            HardDesignKind::Case1 | HardDesignKind::Case2 => [pair(0.0, 0.0), pair(0.0, 1.0)],
        }
    }
}

fn e(i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(2);
    v[i] = 1.0;
    v
}

fn pair(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(alloc::vec![a, b])
}

/// Stream of noiseless `(phi, phi^T theta)` draws from a hard design.
pub fn hard_design_stream<'a, R: Rng>(
    design: &'a DiscreteDesign,
    theta: &'a DVector<f64>,
    rng: &'a mut R,
) -> impl Iterator<Item = (DVector<f64>, f64)> + 'a {
    design.stream(theta, RewardNoise::None, rng)
}

/// Contexts observed in one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Period {
    pub context: usize,
    /// `max_a phi(x, a)^T theta`.
    pub optimal_value: f64,
}

/// Stochastic linear bandit over finitely many contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEnv {
    theta: DVector<f64>,
    /// `features[x][a]`.
    features: Vec<Vec<DVector<f64>>>,
    contexts: Categorical,
    noise: RewardNoise,
    optimal: Vec<f64>,
}

impl LinearEnv {
    pub fn new(
        theta: DVector<f64>,
        features: Vec<Vec<DVector<f64>>>,
        context_probs: Vec<f64>,
        noise: RewardNoise,
    ) -> Result<Self, CoreError> {
        let d = theta.len();
        if d == 0 {
            return Err(CoreError::invalid("theta", "empty"));
        }
        let norm = theta.norm();
        if norm > 1.0 + NORM_SLACK {
            return Err(CoreError::NormOutOfRange { norm, bound: 1.0 });
        }
        if features.len() != context_probs.len() {
            return Err(CoreError::DimensionMismatch {
                expected: features.len(),
                found: context_probs.len(),
            });
        }
        let actions = features.first().map_or(0, |f| f.len());
        if actions == 0 {
            return Err(CoreError::invalid("features", "need at least one context and action"));
        }
        for row in &features {
            if row.len() != actions {
                return Err(CoreError::DimensionMismatch {
                    expected: actions,
                    found: row.len(),
                });
            }
            for phi in row {
                if phi.len() != d {
                    return Err(CoreError::DimensionMismatch {
                        expected: d,
                        found: phi.len(),
                    });
                }
                let norm = phi.norm();
                if norm > 1.0 + NORM_SLACK {
                    return Err(CoreError::NormOutOfRange { norm, bound: 1.0 });
                }
            }
        }
        if let RewardNoise::Uniform { half_width } = noise {
            if !(half_width >= 0.0 && half_width.is_finite()) {
                return Err(CoreError::invalid("half_width", "must be nonnegative"));
            }
        }
        let optimal = features
            .iter()
            .map(|row| row.iter().map(|phi| phi.dot(&theta)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self {
            theta,
            features,
            contexts: Categorical::new(context_probs)?,
            noise,
            optimal,
        })
    }

    /// Random instance: `contexts x actions` features uniform on the sphere
    /// of radius drawn from `[0.5, 1]`, and `theta` uniform on the unit sphere.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        actions: usize,
        contexts: usize,
        noise: RewardNoise,
        rng: &mut R,
    ) -> Result<Self, CoreError> {
        if dim == 0 || actions == 0 || contexts == 0 {
            return Err(CoreError::invalid("dims", "must be positive"));
        }
        let theta = unit_vector(dim, rng);
        let features = (0..contexts)
            .map(|_| {
                (0..actions)
                    .map(|_| unit_vector(dim, rng) * (0.5 + 0.5 * rng.random::<f64>()))
                    .collect()
            })
            .collect();
        Self::new(theta, features, alloc::vec![1.0 / contexts as f64; contexts], noise)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn actions(&self) -> usize {
        self.features[0].len()
    }

    pub fn contexts(&self) -> usize {
        self.features.len()
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn context_probs(&self) -> &[f64] {
        self.contexts.probs()
    }

    pub fn noise(&self) -> RewardNoise {
        self.noise
    }

    pub fn features(&self, context: usize) -> &[DVector<f64>] {
        &self.features[context]
    }

    pub fn mean_reward(&self, phi: &DVector<f64>) -> f64 {
        phi.dot(&self.theta)
    }

    pub fn optimal_value(&self, context: usize) -> f64 {
        self.optimal[context]
    }

    pub fn sample_period<R: Rng + ?Sized>(&self, rng: &mut R) -> Period {
        let context = self.contexts.sample(rng);
        Period {
            context,
            optimal_value: self.optimal[context],
        }
    }

    pub fn realize_reward<R: Rng + ?Sized>(&self, phi: &DVector<f64>, rng: &mut R) -> Reward {
        self.noise.realize(self.mean_reward(phi), rng)
    }
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}
