//! Scenario files: one structured config per experiment, covering the
//! arrival process, workload calibration, engine cost model, policy, and
//! trial count.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::ConfigError;
use crate::scheduler::{Aggregation, PolicyConfig, PolicyKind};
use crate::workload::WorkloadConfig;
use crate::Real;

/// Policy block as written in a scenario file. `m`, `beta`, and
/// `aggregation` may be omitted; they resolve to the policy's defaults
/// (`m = max(1, n/2)`, `beta = min(n/2, n-1)` for the pruning policy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyScenario {
    pub policy: PolicyKind,
    #[serde(default = "default_n")]
    pub n: u32,
    #[serde(default)]
    pub m: Option<u32>,
    #[serde(default = "default_alpha")]
    pub alpha: Real,
    #[serde(default)]
    pub beta: Option<u32>,
    #[serde(default)]
    pub aggregation: Option<Aggregation>,
}

fn default_n() -> u32 {
    1
}
fn default_alpha() -> Real {
    0.5
}

impl PolicyScenario {
    pub fn new(policy: PolicyKind, n: u32) -> Self {
        Self {
            policy,
            n,
            m: None,
            alpha: default_alpha(),
            beta: None,
            aggregation: None,
        }
    }

    /// Resolve omitted fields into a concrete [`PolicyConfig`].
    pub fn resolve(&self) -> Result<PolicyConfig, ConfigError> {
        let n = self.n;
        let derived_m = match self.policy {
            PolicyKind::Vanilla => 1,
            PolicyKind::SelfConsistency => n,
            PolicyKind::Sart | PolicyKind::SartNoPrune => (n / 2).max(1),
        };
        let m = self.m.unwrap_or(derived_m);
        let beta = match self.policy {
            PolicyKind::Sart => self.beta.unwrap_or_else(|| (n / 2).min(n.saturating_sub(1))),
            _ => 0,
        };
        let aggregation = self.aggregation.unwrap_or(match self.policy {
            PolicyKind::Vanilla => Aggregation::Single,
            PolicyKind::SelfConsistency => Aggregation::MajorityVote,
            PolicyKind::Sart | PolicyKind::SartNoPrune => Aggregation::HighestReward,
        });
        let alpha = match self.policy {
            PolicyKind::Sart => self.alpha,
            _ => 0.0,
        };
        let config = PolicyConfig {
            policy: self.policy,
            n,
            m,
            alpha,
            beta,
            aggregation,
        };
        config.validate()?;
        Ok(config)
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Requests per second.
    pub arrival_rate: Real,
    pub horizon_ms: u64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    pub policy: PolicyScenario,
}

fn default_trials() -> u32 {
    1
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.arrival_rate <= 0.0 || !self.arrival_rate.is_finite() {
            return Err(ConfigError::new("arrival_rate", "must be > 0"));
        }
        if self.trials < 1 {
            return Err(ConfigError::new("trials", "must be >= 1"));
        }
        self.workload.validate()?;
        self.engine.validate()?;
        self.policy.resolve()?;
        if self.engine.kv_budget_tokens < self.workload.prompt_len_max {
            return Err(ConfigError::new(
                "engine.kv_budget_tokens",
                format!(
                    "must cover the largest prompt ({} tokens) or admission can stall",
                    self.workload.prompt_len_max
                ),
            ));
        }
        Ok(())
    }

    /// Root seed of one trial: trials are numbered consecutively from the
    /// scenario seed.
    pub fn trial_seed(&self, trial: u32) -> u64 {
        self.seed.wrapping_add(u64::from(trial))
    }

    /// Copy with every optional field resolved and the output directory
    /// stripped, suitable for reproducible metadata echoes.
    pub fn normalized(&self) -> Result<Scenario, ConfigError> {
        let policy = self.policy.resolve()?;
        Ok(Scenario {
            out_dir: None,
            policy: PolicyScenario {
                policy: policy.policy,
                n: policy.n,
                m: Some(policy.m),
                alpha: policy.alpha,
                beta: Some(policy.beta),
                aggregation: Some(policy.aggregation),
            },
            ..self.clone()
        })
    }
}
