use lplr_core::baselines::{SuffstatUcb, UcbSettings};
use lplr_core::environments::{DiscreteDesign, LinearEnv, RewardNoise};
use lplr_core::error::CoreError;
use lplr_core::lplr::{run_oracle, OracleConfig};
use lplr_core::mechanisms::{NoiseMode, PrivacyBudget};
use lplr_core::partition::{Kappas, LayerParams};
use lplr_core::rng::{Channel, StreamKey, StreamRng};
use lplr_core::trace::{simulate, Decision, Policy};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn params(d: usize, kappas: Kappas) -> LayerParams {
    LayerParams::new(d, 1024, 0.1, PrivacyBudget::new(1.0).unwrap(), 0.05, kappas, false).unwrap()
}

fn loose() -> Kappas {
    Kappas {
        activity: 0.002,
        ci_activity: 0.002,
        ci_correction: 0.5,
        ci_width: 0.002,
    }
}

fn atoms_strategy(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-0.57f64..0.57, d), 2..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Fitted directions are unit, orthogonal to the path above them, and
    /// carry the coefficient vector; unfitted bins hold zeros.
    #[test]
    fn fitted_bins_are_orthonormal_rank_one(
        d in 2usize..=3,
        raw in atoms_strategy(3),
        seed in 0u64..1000,
        private in any::<bool>(),
    ) {
        let atoms: Vec<_> = raw.iter().map(|a| DVector::from_column_slice(&a[..d])).collect();
        prop_assume!(atoms.iter().all(|a| a.norm() > 1e-3));
        let design = DiscreteDesign::new(atoms.clone(), vec![1.0 / atoms.len() as f64; atoms.len()]).unwrap();
        let theta = DVector::from_element(d, 0.5 / (d as f64).sqrt());
        let mut rng = StreamKey::new(seed, 0, Channel::Environment).rng();
        let n = 3000;
        let samples: Vec<_> = design.stream(&theta, RewardNoise::Bernoulli, &mut rng).take(2 * d * n).collect();
        let noise = if private { NoiseMode::Private } else { NoiseMode::Off };
        let config = OracleConfig::new(params(d, loose()), n, noise).unwrap();
        let est = run_oracle(
            samples.iter().map(|(p, y)| Some((p, *y))),
            config,
            StreamKey::new(seed, 0, Channel::OracleNoise).rng(),
        )
        .unwrap();
        let tree = est.tree();
        for h in 1..=tree.depth() {
            for bin in tree.layer_bins(h) {
                if !bin.is_fitted() {
                    prop_assert_eq!(bin.eigenvalue, 0.0);
                    prop_assert!(bin.direction.iter().all(|v| *v == 0.0));
                    prop_assert!(bin.theta.iter().all(|v| *v == 0.0));
                    continue;
                }
                prop_assert!((bin.direction.norm() - 1.0).abs() <= 1e-12);
                let aligned = &bin.direction * bin.direction.dot(&bin.theta);
                prop_assert!((aligned - &bin.theta).norm() <= 1e-12 * (1.0 + bin.theta.norm()));
                let (mut layer, mut parent) = (h, bin.parent);
                while let Some(p) = parent {
                    layer -= 1;
                    let up = tree.bin(layer, p);
                    prop_assert!(up.direction.dot(&bin.direction).abs() <= 1e-8);
                    parent = up.parent;
                }
            }
        }
    }

    /// With exact statistics the top eigenvalue of a shell-`k` bin is at
    /// least `gamma^{-2k-2}/(2d)`: every residual there has squared norm
    /// above `gamma^{-2k-2}`, and the top eigenvalue is at least the trace
    /// over `d`.
    #[test]
    fn exact_eigenvalues_respect_the_shell_floor(
        d in 2usize..=3,
        raw in atoms_strategy(3),
        seed in 0u64..1000,
    ) {
        let atoms: Vec<_> = raw.iter().map(|a| DVector::from_column_slice(&a[..d])).collect();
        prop_assume!(atoms.iter().all(|a| a.norm() > 1e-3));
        let design = DiscreteDesign::new(atoms.clone(), vec![1.0 / atoms.len() as f64; atoms.len()]).unwrap();
        let theta = DVector::from_element(d, 0.3);
        let mut rng = StreamKey::new(seed, 0, Channel::Environment).rng();
        let n = 500;
        let samples: Vec<_> = design.stream(&theta, RewardNoise::None, &mut rng).take(2 * d * n).collect();
        let p = params(d, loose());
        let config = OracleConfig::new(p.clone(), n, NoiseMode::Off).unwrap();
        let est = run_oracle(samples.iter().map(|(p, y)| Some((p, *y))), config, StreamKey::new(seed, 0, Channel::OracleNoise).rng()).unwrap();
        let g = p.gamma();
        for h in 1..=est.tree().depth() {
            for bin in est.tree().layer_bins(h).iter().filter(|b| b.is_fitted()) {
                let k = bin.shell() as i32;
                let floor = g.powi(-2 * k - 2) / (2.0 * d as f64);
                prop_assert!(bin.eigenvalue >= floor, "layer {} shell {}: {} < {}", h, k, bin.eigenvalue, floor);
            }
        }
    }
}

/// Plain ridge UCB over exact sums, written against the textbook rule.
struct RidgeUcb {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    t: usize,
    settings: UcbSettings,
}

impl Policy for RidgeUcb {
    fn decide(&mut self, features: &[DVector<f64>], _rng: &mut StreamRng) -> Result<Decision, CoreError> {
        let d = self.cross.len();
        let lift = self.settings.reg + self.settings.shift * (self.t as f64).sqrt();
        let chol = (&self.gram + DMatrix::identity(d, d) * lift).cholesky().unwrap();
        let theta = chol.solve(&self.cross);
        let scores: Vec<f64> = features
            .iter()
            .map(|phi| phi.dot(&theta) + self.settings.bonus * phi.dot(&chol.solve(phi)).max(0.0).sqrt())
            .collect();
        let mut action = 0;
        for (a, s) in scores.iter().enumerate() {
            if *s > scores[action] {
                action = a;
            }
        }
        Ok(Decision {
            action,
            active_set_size: features.len(),
        })
    }

    fn observe(&mut self, features: &[DVector<f64>], action: usize, reward: f64) -> Result<(), CoreError> {
        let phi = &features[action];
        let y = reward.clamp(-1.0, 1.0);
        for j in 0..phi.len() {
            for i in 0..phi.len() {
                self.gram[(i, j)] += phi[i] * phi[j];
            }
            self.cross[j] += y * phi[j];
        }
        self.t += 1;
        Ok(())
    }
}

#[test]
fn noiseless_suffstat_ucb_is_ridge_ucb() {
    for seed in 0..20 {
        let mut rng = StreamKey::new(seed, 0, Channel::Environment).rng();
        let d = 2 + (seed as usize % 2);
        let env = LinearEnv::random(d, 4, 8, RewardNoise::Bernoulli, &mut rng).unwrap();
        let settings = UcbSettings {
            reg: 1.0,
            shift: 0.5,
            bonus: 0.7,
        };
        let run = |policy: &mut dyn Policy| {
            let mut env_rng = StreamKey::new(seed, 1, Channel::Environment).rng();
            let mut pol_rng = StreamKey::new(seed, 1, Channel::Policy).rng();
            simulate(&env, policy, 2000, &mut env_rng, &mut pol_rng, 1, |_, _| {}).unwrap()
        };
        let budget = PrivacyBudget::new(1.0).unwrap();
        let mut private = SuffstatUcb::new(d, budget, NoiseMode::Off, settings, StreamKey::new(seed, 0, Channel::OracleNoise).rng());
        let mut plain = RidgeUcb {
            gram: DMatrix::zeros(d, d),
            cross: DVector::zeros(d),
            t: 0,
            settings,
        };
        let a = run(&mut private);
        let b = run(&mut plain);
        assert_eq!(a, b, "seed {seed}");
    }
}
