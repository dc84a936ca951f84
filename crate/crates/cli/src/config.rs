use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use statebridge_core::dist::derive_seed;
use statebridge_core::mediator::UserAgentPolicy;
use statebridge_core::state::DEFAULT_MAX_RETRIES;
use statebridge_server::ServerConfig;
use statebridge_sim::SimConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_participants")]
    pub participants: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_participants() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Seconds before an unanswered confirmation aborts the task.
    #[serde(default)]
    pub confirm_timeout_s: Option<f64>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            listen: default_listen(),
            max_retries: DEFAULT_MAX_RETRIES,
            confirm_timeout_s: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub server: ServerSection,
    pub sim: SimConfig,
    #[serde(default)]
    pub user: UserAgentPolicy,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text).map_err(|e| ConfigError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // template paths are relative to the config file
        if let (Some(t), Some(dir)) = (config.server.templates.as_mut(), path.parent()) {
            if t.is_relative() {
                *t = dir.join(&*t);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.experiment.participants < 2 {
            return Err(ConfigError::Invalid("experiment.participants must be >= 2".into()));
        }
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.user.validate().map_err(ConfigError::Invalid)?;
        if let Some(t) = self.server.confirm_timeout_s {
            if !(t.is_finite() && t > 0.0) {
                return Err(ConfigError::Invalid("server.confirm_timeout_s must be > 0".into()));
            }
        }
        if self.sim.max_retries != self.server.max_retries {
            return Err(ConfigError::Invalid(format!(
                "sim.max_retries ({}) differs from server.max_retries ({})",
                self.sim.max_retries, self.server.max_retries
            )));
        }
        Ok(())
    }

    pub fn server_config(&self, trial_log: Option<PathBuf>) -> ServerConfig {
        ServerConfig {
            max_retries: self.server.max_retries,
            time_scale: if self.sim.time_scale > 0.0 {
                self.sim.time_scale
            } else {
                1.0
            },
            confirm_timeout: self.server.confirm_timeout_s.map(Duration::from_secs_f64),
            templates_path: self.server.templates.clone(),
            trial_log,
            user: self.user,
            user_seed: derive_seed(self.experiment.seed, "server-user"),
        }
    }

    /// Simulator config for a batch under master seed `seed`.
    pub fn batch_sim(&self, seed: u64) -> SimConfig {
        SimConfig {
            rng_seed: derive_seed(seed, "sim"),
            ..self.sim.clone()
        }
    }
}
