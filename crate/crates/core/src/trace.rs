//! Policy interface and the regret simulation loop.

use alloc::vec::Vec;
use nalgebra::DVector;

use crate::environments::LinearEnv;
use crate::error::CoreError;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub action: usize,
    pub active_set_size: usize,
}

pub trait Policy {
    fn decide(&mut self, features: &[DVector<f64>], rng: &mut StreamRng) -> Result<Decision, CoreError>;

    fn observe(&mut self, features: &[DVector<f64>], action: usize, reward: f64) -> Result<(), CoreError>;

    /// 1-based epoch index, 0 for policies without epochs.
    fn epoch(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub cum_regret: f64,
    pub active_set_size: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub horizon: u64,
    pub rows: Vec<TraceRow>,
    pub final_regret: f64,
    pub clamped_rewards: u64,
}

/// What the hook sees each period, before the policy observes the reward.
#[derive(Debug, Clone, Copy)]
pub struct PeriodView<'a> {
    pub t: u64,
    pub context: usize,
    pub features: &'a [DVector<f64>],
    pub decision: &'a Decision,
    pub regret: f64,
}

/// Runs `policy` on `env` for `horizon` periods, recording a row every
/// `stride` periods and at the last one.
pub fn simulate<P, H>(
    env: &LinearEnv,
    policy: &mut P,
    horizon: u64,
    env_rng: &mut StreamRng,
    policy_rng: &mut StreamRng,
    stride: u64,
    mut hook: H,
) -> Result<RegretTrace, CoreError>
where
    P: Policy + ?Sized,
    H: FnMut(&PeriodView<'_>, &P),
{
    if stride == 0 {
        return Err(CoreError::invalid("stride", "must be positive"));
    }
    let mut rows = Vec::new();
    let mut cum = 0.0;
    let mut clamped = 0;
    for t in 1..=horizon {
        let period = env.sample_period(env_rng);
        let features = env.features(period.context);
        let decision = policy.decide(features, policy_rng)?;
        if decision.action >= features.len() {
            return Err(CoreError::invalid("action", "out of range"));
        }
        let phi = &features[decision.action];
        let regret = period.optimal_value - env.mean_reward(phi);
        let reward = env.realize_reward(phi, env_rng);
        clamped += reward.clamped as u64;
        cum += regret;
        hook(
            &PeriodView {
                t,
                context: period.context,
                features,
                decision: &decision,
                regret,
            },
            policy,
        );
        let epoch = policy.epoch();
        policy.observe(features, decision.action, reward.value)?;
        if t % stride == 0 || t == horizon {
            rows.push(TraceRow {
                t,
                cum_regret: cum,
                active_set_size: decision.active_set_size,
                epoch,
            });
        }
    }
    Ok(RegretTrace {
        horizon,
        rows,
        final_regret: cum,
        clamped_rewards: clamped,
    })
}
