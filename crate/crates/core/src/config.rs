//! Top-level run configuration read by the command-line tool.
//!
//! ```toml
//! [scenario]
//! humans = 5
//! ped_policy = "orca"
//!
//! [policy]
//! seed = 0
//!
//! [train]
//! episodes = 2000
//!
//! [eval]
//! n_runs = 500
//! ```
//!
//! Every section and field is optional.

use serde::{Deserialize, Serialize};

use crate::env::{EnvError, ScenarioConfig};
use crate::eval::EvalConfig;
use crate::policy::{PolicyConfig, PolicyError};
use crate::train::{TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error(transparent)]
    Scenario(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
