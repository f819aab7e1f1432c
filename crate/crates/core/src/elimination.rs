//! Epoch-doubling action elimination over per-action oracles.
//!
//! Epoch `tau` lasts `n_tau = 2^tau n_0` periods. Every period the active
//! set is filtered through the tables of all finished epochs, an action is
//! drawn uniformly from what survives, and every action's oracle receives a
//! record: the played action gets `(phi, y)`, the others the dummy record.
//! At the end of the epoch each complete oracle becomes that action's next
//! table; an incomplete one leaves the previous table in place.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec::Vec;
use nalgebra::DVector;
use rand::Rng;

use crate::error::CoreError;
use crate::lplr::{LplrOracle, OracleConfig};
use crate::math;
use crate::mechanisms::{NoiseMode, PrivacyBudget};
use crate::oracle::{ConstantEstimate, Estimate, OracleFactory, RegressionOracle};
use crate::partition::{Kappas, LayerParams};
use crate::rng::{StreamKey, StreamRng};
use crate::trace::{Decision, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSchedule {
    pub n0: u64,
    pub horizon: u64,
}

impl EpochSchedule {
    pub fn new(n0: u64, horizon: u64) -> Result<Self, CoreError> {
        if n0 == 0 {
            return Err(CoreError::invalid("n0", "must be positive"));
        }
        Ok(Self { n0, horizon })
    }

    /// `n_0 = ceil(d^2 ln(d T / beta))`.
    pub fn standard(dim: usize, horizon: u64, beta: f64) -> Result<Self, CoreError> {
        let d = dim as f64;
        let n0 = math::ceil(d * d * math::ln(d * horizon as f64 / beta)).max(1.0) as u64;
        Self::new(n0, horizon)
    }

    /// Length of epoch `tau >= 1`, saturating.
    pub fn length(&self, epoch: usize) -> u64 {
        let shift = epoch.min(63) as u32;
        self.n0.saturating_mul(1u64.checked_shl(shift).unwrap_or(u64::MAX))
    }

    /// Epoch containing period `t >= 1`.
    pub fn epoch_of(&self, t: u64) -> usize {
        let mut tau = 1;
        let mut end = self.length(1);
        while t > end {
            tau += 1;
            end = end.saturating_add(self.length(tau));
        }
        tau
    }
}

/// Successive filtering of the full action set through `tables`, where
/// `tables[j][a]` is the estimate of action `a` used by filter `j + 1`.
pub fn active_set_chain(tables: &[Vec<Arc<dyn Estimate>>], features: &[DVector<f64>]) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..features.len()).collect();
    let mut chain = Vec::with_capacity(tables.len());
    for table in tables {
        let preds: Vec<_> = current.iter().map(|&a| table[a].predict(&features[a])).collect();
        let best = preds
            .iter()
            .map(|p| p.value - p.width)
            .fold(f64::NEG_INFINITY, f64::max);
        current = current
            .iter()
            .zip(&preds)
            .filter(|(_, p)| p.value + p.width >= best)
            .map(|(&a, _)| a)
            .collect();
        debug_assert!(!current.is_empty(), "non-finite prediction emptied the active set");
        chain.push(current.clone());
    }
    chain
}

/// Uniform draw from a nonempty set.
pub fn select_action<R: Rng + ?Sized>(active: &[usize], rng: &mut R) -> usize {
    active[rng.random_range(0..active.len())]
}

pub struct EliminationPolicy {
    factory: Box<dyn OracleFactory>,
    schedule: EpochSchedule,
    noise_key: StreamKey,
    tables: Vec<Vec<Arc<dyn Estimate>>>,
    oracles: Vec<Box<dyn RegressionOracle>>,
    epoch: usize,
    elapsed_in_epoch: u64,
}

impl EliminationPolicy {
    /// Starts with the uninformed table `f = 0`, `Delta = 1`.
    pub fn new(
        actions: usize,
        factory: Box<dyn OracleFactory>,
        schedule: EpochSchedule,
        noise_key: StreamKey,
    ) -> Result<Self, CoreError> {
        let initial: Arc<dyn Estimate> = Arc::new(ConstantEstimate::uninformed());
        Self::with_initial_table(alloc::vec![initial; actions], factory, schedule, noise_key)
    }

    pub fn with_initial_table(
        initial: Vec<Arc<dyn Estimate>>,
        factory: Box<dyn OracleFactory>,
        schedule: EpochSchedule,
        noise_key: StreamKey,
    ) -> Result<Self, CoreError> {
        if initial.is_empty() {
            return Err(CoreError::invalid("actions", "must be positive"));
        }
        let mut policy = Self {
            factory,
            schedule,
            noise_key,
            tables: alloc::vec![initial],
            oracles: Vec::new(),
            epoch: 1,
            elapsed_in_epoch: 0,
        };
        policy.oracles = policy.build_oracles()?;
        Ok(policy)
    }

    fn build_oracles(&self) -> Result<Vec<Box<dyn RegressionOracle>>, CoreError> {
        let samples = self.schedule.length(self.epoch) as usize;
        (0..self.tables[0].len())
            .map(|a| {
                let rng = self.noise_key.with_epoch(self.epoch as u64).with_oracle(a as u64).rng();
                self.factory.build(self.epoch, a, samples, rng)
            })
            .collect()
    }

    pub fn actions(&self) -> usize {
        self.tables[0].len()
    }

    /// Tables of finished epochs, the uninformed one first.
    pub fn tables(&self) -> &[Vec<Arc<dyn Estimate>>] {
        &self.tables
    }

    pub fn chain(&self, features: &[DVector<f64>]) -> Vec<Vec<usize>> {
        active_set_chain(&self.tables, features)
    }

    fn rollover(&mut self) -> Result<(), CoreError> {
        let oracles = core::mem::take(&mut self.oracles);
        let previous = self.tables.last().expect("tables are never empty").clone();
        let mut next = Vec::with_capacity(oracles.len());
        for (a, oracle) in oracles.into_iter().enumerate() {
            if oracle.is_complete() {
                next.push(Arc::from(oracle.finalize()?));
            } else {
                next.push(previous[a].clone());
            }
        }
        self.tables.push(next);
        self.epoch += 1;
        self.elapsed_in_epoch = 0;
        self.oracles = self.build_oracles()?;
        Ok(())
    }
}

impl Policy for EliminationPolicy {
    fn decide(&mut self, features: &[DVector<f64>], rng: &mut StreamRng) -> Result<Decision, CoreError> {
        if features.len() != self.actions() {
            return Err(CoreError::DimensionMismatch {
                expected: self.actions(),
                found: features.len(),
            });
        }
        let chain = self.chain(features);
        let active = chain.last().expect("at least one table");
        Ok(Decision {
            action: select_action(active, rng),
            active_set_size: active.len(),
        })
    }

    fn observe(&mut self, features: &[DVector<f64>], action: usize, reward: f64) -> Result<(), CoreError> {
        for (a, oracle) in self.oracles.iter_mut().enumerate() {
            if a == action {
                oracle.feed(Some((&features[a], reward)))?;
            } else {
                oracle.feed(None)?;
            }
        }
        self.elapsed_in_epoch += 1;
        if self.elapsed_in_epoch >= self.schedule.length(self.epoch) {
            self.rollover()?;
        }
        Ok(())
    }

    fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Builds layered private oracles sized to each epoch.
#[derive(Debug, Clone)]
pub struct LplrFactory {
    pub dim: usize,
    pub horizon: u64,
    pub beta: f64,
    pub budget: PrivacyBudget,
    pub delta: f64,
    pub kappas: Kappas,
    pub strict_constants: bool,
    pub noise: NoiseMode,
}

impl LplrFactory {
    pub fn layer_params(&self) -> Result<LayerParams, CoreError> {
        LayerParams::new(
            self.dim,
            self.horizon,
            self.beta,
            self.budget,
            self.delta,
            self.kappas,
            self.strict_constants,
        )
    }

    /// Per-layer batch for an epoch of `samples` periods: `floor(samples / 2d)`,
    /// or zero when that falls short of the strict-constants floor.
    pub fn per_layer(&self, params: &LayerParams, samples: usize) -> usize {
        let n = samples / (2 * self.dim);
        if self.strict_constants && (n as f64) < OracleConfig::sample_floor(params) {
            0
        } else {
            n
        }
    }
}

impl OracleFactory for LplrFactory {
    fn build(
        &self,
        _epoch: usize,
        _action: usize,
        samples: usize,
        rng: StreamRng,
    ) -> Result<Box<dyn RegressionOracle>, CoreError> {
        let params = self.layer_params()?;
        let n = self.per_layer(&params, samples);
        let config = OracleConfig::new(params, n, self.noise)?;
        Ok(Box::new(LplrOracle::new(config, rng)))
    }
}

/// Oracle that ignores its records and yields a preset estimate once it has
/// seen its budget.
pub struct FixedOracle {
    estimate: Arc<dyn Estimate>,
    remaining: usize,
}

impl RegressionOracle for FixedOracle {
    fn feed(&mut self, _sample: Option<(&DVector<f64>, f64)>) -> Result<(), CoreError> {
        self.remaining = self.remaining.saturating_sub(1);
        Ok(())
    }

    fn is_complete(&self) -> bool {
        self.remaining == 0
    }

    fn finalize(self: Box<Self>) -> Result<Box<dyn Estimate>, CoreError> {
        Ok(Box::new(Shared(self.estimate)))
    }
}

struct Shared(Arc<dyn Estimate>);

impl Estimate for Shared {
    fn predict(&self, phi: &DVector<f64>) -> crate::oracle::Prediction {
        self.0.predict(phi)
    }
}

/// Hands out [`FixedOracle`]s over per-action estimates.
pub struct FixedFactory {
    pub estimates: Vec<Arc<dyn Estimate>>,
}

impl OracleFactory for FixedFactory {
    fn build(
        &self,
        _epoch: usize,
        action: usize,
        samples: usize,
        _rng: StreamRng,
    ) -> Result<Box<dyn RegressionOracle>, CoreError> {
        Ok(Box::new(FixedOracle {
            estimate: self.estimates[action].clone(),
            remaining: samples,
        }))
    }
}

/// Exact linear model with zero width: `f = phi^T theta`, `Delta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEstimate {
    pub theta: DVector<f64>,
}

impl Estimate for TruthEstimate {
    fn predict(&self, phi: &DVector<f64>) -> crate::oracle::Prediction {
        crate::oracle::Prediction {
            value: phi.dot(&self.theta),
            width: 0.0,
        }
    }
}

/// Elimination policy whose every table is the ground truth.
pub fn injected_truth_policy(
    theta: &DVector<f64>,
    actions: usize,
    schedule: EpochSchedule,
    noise_key: StreamKey,
) -> Result<EliminationPolicy, CoreError> {
    let truth: Arc<dyn Estimate> = Arc::new(TruthEstimate { theta: theta.clone() });
    let tables = alloc::vec![truth; actions];
    let factory = FixedFactory {
        estimates: tables.clone(),
    };
    EliminationPolicy::with_initial_table(tables, Box::new(factory), schedule, noise_key)
}
