//! Contract between the bandit policy and its per-action regression oracles.
//!
//! An oracle consumes a fixed stream of records, one per period, where
//! `None` stands for the dummy record fed to actions that were not played.
//! Once complete it yields an [`Estimate`]: a prediction `f(phi)` together
//! with a confidence width `Delta(phi)` in `[0, 1]` that is zero on the
//! zero feature.

use alloc::boxed::Box;
use nalgebra::DVector;

use crate::error::CoreError;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub width: f64,
}

pub trait Estimate: Send + Sync {
    fn predict(&self, phi: &DVector<f64>) -> Prediction;
}

/// `f = value`, `Delta = width` everywhere except at the zero feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantEstimate {
    pub value: f64,
    pub width: f64,
}

impl ConstantEstimate {
    /// The table every action starts with: `f = 0`, `Delta = 1`.
    pub fn uninformed() -> Self {
        Self {
            value: 0.0,
            width: 1.0,
        }
    }
}

impl Estimate for ConstantEstimate {
    fn predict(&self, phi: &DVector<f64>) -> Prediction {
        if is_dummy(phi) {
            return Prediction {
                value: 0.0,
                width: 0.0,
            };
        }
        Prediction {
            value: self.value,
            width: self.width,
        }
    }
}

pub trait RegressionOracle: Send {
    /// Feeds the next record. Records past the oracle's budget are dropped.
    fn feed(&mut self, sample: Option<(&DVector<f64>, f64)>) -> Result<(), CoreError>;

    fn is_complete(&self) -> bool;

    fn finalize(self: Box<Self>) -> Result<Box<dyn Estimate>, CoreError>;
}

/// Builds the oracle of one action for one epoch.
pub trait OracleFactory: Send + Sync {
    /// `samples` is the number of periods in the epoch.
    fn build(
        &self,
        epoch: usize,
        action: usize,
        samples: usize,
        rng: StreamRng,
    ) -> Result<Box<dyn RegressionOracle>, CoreError>;
}

pub(crate) fn is_dummy(phi: &DVector<f64>) -> bool {
    phi.iter().all(|&v| v == 0.0)
}
