//! Environment specs from the config and the objects built from them.

use lplr_core::environments::{DiscreteDesign, HardDesign, HardDesignKind, LinearEnv, RewardNoise};
use lplr_core::rng::{Channel, StreamKey};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    /// Finite-context bandit with `features[context][action]`.
    Linear {
        theta: Vec<f64>,
        features: Vec<Vec<Vec<f64>>>,
        /// Uniform over contexts when absent.
        #[serde(default)]
        probs: Option<Vec<f64>>,
        #[serde(default)]
        noise: RewardNoise,
    },
    /// Random unit-ball features and a random unit `theta`.
    RandomLinear {
        dim: usize,
        actions: usize,
        contexts: usize,
        #[serde(default)]
        noise: RewardNoise,
        #[serde(default)]
        seed: u64,
    },
    /// Two actions per context, `(c_x, +spread)` and `(c_x, -spread)`, with
    /// `c_x` spread evenly so every feature has norm at most 1. The reward
    /// gap sits in a direction of variance `spread^2`.
    SpreadPair {
        contexts: usize,
        spread: f64,
        theta: Vec<f64>,
        #[serde(default)]
        noise: RewardNoise,
    },
    /// Offline feature law with finite support.
    Design {
        atoms: Vec<Vec<f64>>,
        #[serde(default)]
        probs: Option<Vec<f64>>,
        theta: Vec<f64>,
        #[serde(default = "noiseless")]
        noise: RewardNoise,
    },
    /// Two-point constructions whose law depends on the sample size.
    Hard {
        design: HardDesignKind,
        /// Which of the two indistinguishable parameters is the truth.
        #[serde(default = "second")]
        hypothesis: usize,
        /// Mixing parameter of the partition cases; `1/sqrt(n)` if absent.
        #[serde(default)]
        mix: Option<f64>,
        #[serde(default = "noiseless")]
        noise: RewardNoise,
    },
}

fn noiseless() -> RewardNoise {
    RewardNoise::None
}

fn second() -> usize {
    1
}

/// Feature law, true parameter and reward noise of an offline experiment.
#[derive(Debug, Clone)]
pub struct OfflineDesign {
    pub design: DiscreteDesign,
    pub theta: DVector<f64>,
    pub noise: RewardNoise,
}

fn config_err(what: &str, e: impl std::fmt::Display) -> SimError {
    SimError::Config(format!("env: {what}: {e}"))
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

impl EnvSpec {
    pub fn dim(&self) -> Result<usize, SimError> {
        let d = match self {
            EnvSpec::Linear { theta, .. } | EnvSpec::Design { theta, .. } => theta.len(),
            EnvSpec::RandomLinear { dim, .. } => *dim,
            EnvSpec::SpreadPair { .. } | EnvSpec::Hard { .. } => 2,
        };
        if d == 0 {
            return Err(SimError::Config("env: dimension must be positive".into()));
        }
        Ok(d)
    }

    /// Bandit environment; offline-only specs are rejected.
    pub fn bandit_env(&self) -> Result<LinearEnv, SimError> {
        match self {
            EnvSpec::Linear {
                theta,
                features,
                probs,
                noise,
            } => {
                let feats = features
                    .iter()
                    .map(|ctx| ctx.iter().map(|f| DVector::from_column_slice(f)).collect())
                    .collect();
                let probs = probs.clone().unwrap_or_else(|| uniform(features.len()));
                LinearEnv::new(DVector::from_column_slice(theta), feats, probs, *noise)
                    .map_err(|e| config_err("linear", e))
            }
            EnvSpec::RandomLinear {
                dim,
                actions,
                contexts,
                noise,
                seed,
            } => {
                let mut rng = StreamKey::new(*seed, 0, Channel::Design).rng();
                LinearEnv::random(*dim, *actions, *contexts, *noise, &mut rng).map_err(|e| config_err("random_linear", e))
            }
            EnvSpec::SpreadPair {
                contexts,
                spread,
                theta,
                noise,
            } => {
                if *contexts < 2 || !(*spread > 0.0 && *spread < 1.0) || theta.len() != 2 {
                    return Err(SimError::Config(
                        "env: spread_pair needs contexts >= 2, spread in (0, 1) and a 2-d theta".into(),
                    ));
                }
                let reach = 0.95 * (1.0 - spread * spread).sqrt();
                let feats = (0..*contexts)
                    .map(|j| {
                        let c = reach * (-1.0 + 2.0 * j as f64 / (*contexts - 1) as f64);
                        vec![DVector::from_vec(vec![c, *spread]), DVector::from_vec(vec![c, -spread])]
                    })
                    .collect();
                LinearEnv::new(DVector::from_column_slice(theta), feats, uniform(*contexts), *noise)
                    .map_err(|e| config_err("spread_pair", e))
            }
            EnvSpec::Design { .. } | EnvSpec::Hard { .. } => {
                Err(SimError::Config("env: offline designs cannot drive a bandit".into()))
            }
        }
    }

    /// Offline law at sample size `n`. Bandit specs give the law of the
    /// played feature under uniformly random actions.
    pub fn offline_design(&self, n: u64, alpha: f64) -> Result<OfflineDesign, SimError> {
        match self {
            EnvSpec::Design {
                atoms,
                probs,
                theta,
                noise,
            } => {
                let atoms: Vec<_> = atoms.iter().map(|a| DVector::from_column_slice(a)).collect();
                let probs = probs.clone().unwrap_or_else(|| uniform(atoms.len()));
                let design = DiscreteDesign::new(atoms, probs).map_err(|e| config_err("design", e))?;
                let theta = DVector::from_column_slice(theta);
                if theta.len() != design.dim() || theta.norm() > 1.0 + 1e-12 {
                    return Err(SimError::Config("env: design theta must match the atoms and have norm <= 1".into()));
                }
                Ok(OfflineDesign {
                    design,
                    theta,
                    noise: *noise,
                })
            }
            EnvSpec::Hard {
                design,
                hypothesis,
                mix,
                noise,
            } => {
                let mut hard = HardDesign::new(*design, n, alpha).map_err(|e| config_err("hard", e))?;
                if let Some(m) = mix {
                    hard = hard.with_delta(*m).map_err(|e| config_err("hard", e))?;
                }
                let thetas = hard.hypotheses();
                let theta = thetas
                    .get(*hypothesis)
                    .ok_or_else(|| SimError::Config("env: hypothesis must be 0 or 1".into()))?
                    .clone();
                Ok(OfflineDesign {
                    design: hard.design(),
                    theta,
                    noise: *noise,
                })
            }
            _ => {
                let env = self.bandit_env()?;
                let a = env.actions();
                let mut atoms = Vec::with_capacity(env.contexts() * a);
                let mut probs = Vec::with_capacity(env.contexts() * a);
                for x in 0..env.contexts() {
                    for phi in env.features(x) {
                        atoms.push(phi.clone());
                        probs.push(env.context_probs()[x] / a as f64);
                    }
                }
                let design = DiscreteDesign::new(atoms, probs).map_err(|e| config_err("mixture", e))?;
                Ok(OfflineDesign {
                    design,
                    theta: env.theta().clone(),
                    noise: env.noise(),
                })
            }
        }
    }
}
