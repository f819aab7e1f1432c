//! Experiment configuration: JSON schema, validation and hashing.

use std::path::{Path, PathBuf};

use lplr_core::baselines::UcbSettings;
use lplr_core::mechanisms::{NoiseMode, PrivacyBudget};
use lplr_core::partition::{Kappas, LayerParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::SimError;
use crate::scenario::EnvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RegretCurve,
    MadCurve,
    MseLowerBound,
    CoverageAudit,
    MechanismSelftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    LplrElimination,
    SuffstatUcb,
    NonprivateRidgeElim,
    /// Elimination with the true model and zero widths in every table.
    InjectedTruth,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::LplrElimination => "lplr_elimination",
            PolicyKind::SuffstatUcb => "suffstat_ucb",
            PolicyKind::NonprivateRidgeElim => "nonprivate_ridge_elim",
            PolicyKind::InjectedTruth => "injected_truth",
        }
    }

    pub fn is_private(self) -> bool {
        matches!(self, PolicyKind::LplrElimination | PolicyKind::SuffstatUcb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Lplr,
    InputRidge,
    InputBiasCorrected,
    Suffstat,
    NonprivateRidge,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Lplr => "lplr",
            EstimatorKind::InputRidge => "input_ridge",
            EstimatorKind::InputBiasCorrected => "input_bias_corrected",
            EstimatorKind::Suffstat => "suffstat",
            EstimatorKind::NonprivateRidge => "nonprivate_ridge",
        }
    }

    pub fn is_private(self) -> bool {
        !matches!(self, EstimatorKind::NonprivateRidge)
    }

    pub fn is_input_perturbation(self) -> bool {
        matches!(self, EstimatorKind::InputRidge | EstimatorKind::InputBiasCorrected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySettings {
    pub alpha: f64,
    /// Refuse to run with noise switched off.
    pub require_privacy: bool,
    pub zero_noise: bool,
}

impl Default for PrivacySettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            require_privacy: true,
            zero_noise: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub beta: f64,
    pub delta: f64,
    /// Horizon that sets `gamma = horizon^beta` in offline experiments.
    /// Regret experiments use each grid horizon instead.
    pub horizon: u64,
    pub strict_constants: bool,
    /// Defaults to the minimum constants in strict-constants mode and to the
    /// desk preset otherwise.
    pub kappas: Option<Kappas>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.05,
            horizon: 1024,
            strict_constants: false,
            kappas: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeSettings {
    pub reg: f64,
    /// Multiplier of the ellipsoidal width of the non-private oracle.
    pub width_scale: f64,
}

impl Default for RidgeSettings {
    fn default() -> Self {
        Self {
            reg: 1.0,
            width_scale: 1.0,
        }
    }
}

/// Full elimination runs attached to a coverage audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyAudit {
    pub horizon: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestSettings {
    /// Monte Carlo draws per moment check.
    pub draws: usize,
}

impl Default for SelftestSettings {
    fn default() -> Self {
        Self { draws: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    /// Horizons for regret curves, per-layer batch sizes otherwise.
    #[serde(default)]
    pub grid: Vec<u64>,
    #[serde(default)]
    pub privacy: PrivacySettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub env: Option<EnvSpec>,
    #[serde(default)]
    pub policies: Vec<PolicyKind>,
    #[serde(default)]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub ucb: UcbSettings,
    #[serde(default)]
    pub ridge: RidgeSettings,
    #[serde(default = "default_stride")]
    pub trace_stride: u64,
    #[serde(default)]
    pub policy_audit: Option<PolicyAudit>,
    #[serde(default)]
    pub selftest: SelftestSettings,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn default_stride() -> u64 {
    64
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub zero_noise: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(format!("invalid config: {e}")))
    }

    pub fn apply(&mut self, overrides: &Overrides) -> Result<(), SimError> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            self.out_dir = Some(dir.clone());
        }
        if overrides.zero_noise {
            if self.privacy.require_privacy {
                return Err(SimError::Config(
                    "--zero-noise refused: the config sets privacy.require_privacy".into(),
                ));
            }
            self.privacy.zero_noise = true;
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseMode {
        if self.privacy.zero_noise {
            NoiseMode::Off
        } else {
            NoiseMode::Private
        }
    }

    pub fn budget(&self) -> PrivacyBudget {
        PrivacyBudget::new(self.privacy.alpha).expect("validated")
    }

    pub fn kappas(&self, dim: usize) -> Kappas {
        match self.oracle.kappas {
            Some(k) => k,
            None if self.oracle.strict_constants => {
                Kappas::proven_minimum(dim, self.privacy.alpha, self.oracle.beta, self.oracle.delta)
            }
            None => Kappas::desk_scale(),
        }
    }

    /// Layer parameters for an oracle over `dim` features with `gamma`
    /// set by `horizon`.
    pub fn layer_params(&self, dim: usize, horizon: u64) -> Result<LayerParams, SimError> {
        LayerParams::new(
            dim,
            horizon,
            self.oracle.beta,
            self.budget(),
            self.oracle.delta,
            self.kappas(dim),
            self.oracle.strict_constants,
        )
        .map_err(|e| SimError::Config(format!("oracle parameters: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON form, output location excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks every field before any computation starts.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name {:?} must be a plain file name", self.name));
        }
        PrivacyBudget::new(self.privacy.alpha).map_err(|e| SimError::Config(format!("privacy.alpha: {e}")))?;
        if self.privacy.zero_noise && self.privacy.require_privacy {
            return bad("privacy.zero_noise conflicts with privacy.require_privacy".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.trace_stride == 0 {
            return bad("trace_stride must be at least 1".into());
        }
        if self.kind == ExperimentKind::MechanismSelftest {
            if self.selftest.draws < 1000 {
                return bad("selftest.draws must be at least 1000".into());
            }
            return Ok(());
        }
        let env = match &self.env {
            Some(env) => env,
            None => return bad("env is required".into()),
        };
        if self.grid.is_empty() || self.grid.contains(&0) {
            return bad("grid must be a nonempty list of positive integers".into());
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("grid must be strictly increasing".into());
        }
        let slope_kinds = [
            ExperimentKind::RegretCurve,
            ExperimentKind::MadCurve,
            ExperimentKind::MseLowerBound,
        ];
        if slope_kinds.contains(&self.kind) && self.grid.len() < 4 {
            return bad("slope experiments need at least 4 grid points".into());
        }
        let dim = env.dim()?;
        match self.kind {
            ExperimentKind::RegretCurve => {
                if self.policies.is_empty() {
                    return bad("regret_curve needs at least one policy".into());
                }
                env.bandit_env()?;
                for &t in &self.grid {
                    if self.policies.contains(&PolicyKind::LplrElimination) {
                        self.layer_params(dim, t)?;
                    }
                }
                if self.privacy.require_privacy && self.policies.iter().any(|p| !p.is_private()) {
                    return bad("privacy.require_privacy forbids non-private policies".into());
                }
            }
            ExperimentKind::MadCurve | ExperimentKind::MseLowerBound => {
                if self.estimators.is_empty() {
                    return bad("offline curves need at least one estimator".into());
                }
                if self.privacy.require_privacy && self.estimators.iter().any(|e| !e.is_private()) {
                    return bad("privacy.require_privacy forbids non-private estimators".into());
                }
                if self.estimators.contains(&EstimatorKind::Lplr) {
                    self.layer_params(dim, self.oracle.horizon)?;
                }
                for &n in &self.grid {
                    env.offline_design(n, self.privacy.alpha)?;
                }
            }
            ExperimentKind::CoverageAudit => {
                self.layer_params(dim, self.oracle.horizon)?;
                for &n in &self.grid {
                    env.offline_design(n, self.privacy.alpha)?;
                }
                if let Some(audit) = self.policy_audit {
                    env.bandit_env()?;
                    self.layer_params(dim, audit.horizon)?;
                }
            }
            ExperimentKind::MechanismSelftest => unreachable!(),
        }
        if self.ridge.reg <= 0.0 || self.ucb.reg <= 0.0 {
            return bad("ridge.reg and ucb.reg must be positive".into());
        }
        Ok(())
    }
}
