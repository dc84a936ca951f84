use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statebridge_core::dist::LogNormalSpec;
use statebridge_core::state::{ExecutionState, FailureCategory, DEFAULT_MAX_RETRIES};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sim config: {0}")]
pub struct ConfigError(pub String);

/// Duration and failure model for one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// For GRASPING this is the duration of a single attempt.
    pub duration: LogNormalSpec,
    #[serde(default)]
    pub failure_probability: f64,
    #[serde(default)]
    pub category_weights: BTreeMap<FailureCategory, f64>,
}

impl PhaseConfig {
    pub fn reliable(duration: LogNormalSpec) -> Self {
        PhaseConfig {
            duration,
            failure_probability: 0.0,
            category_weights: BTreeMap::new(),
        }
    }

    pub fn failing(duration: LogNormalSpec, probability: f64, weights: &[(FailureCategory, f64)]) -> Self {
        PhaseConfig {
            duration,
            failure_probability: probability,
            category_weights: weights.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub navigating: PhaseConfig,
    pub searching: PhaseConfig,
    pub grasping: PhaseConfig,
    pub delivering: PhaseConfig,
    pub recovering: PhaseConfig,
    pub grasp_success_probability: f64,
    /// In-phase attempts before GRASP_FAILURE is raised.
    pub grasp_attempt_cap: u32,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Virtual ms per wall ms; 0 runs as fast as possible.
    #[serde(default)]
    pub time_scale: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

impl SimConfig {
    pub fn phase(&self, phase: ExecutionState) -> Result<&PhaseConfig, ConfigError> {
        match phase {
            ExecutionState::Navigating => Ok(&self.navigating),
            ExecutionState::Searching => Ok(&self.searching),
            ExecutionState::Grasping => Ok(&self.grasping),
            ExecutionState::Delivering => Ok(&self.delivering),
            ExecutionState::Recovering => Ok(&self.recovering),
            other => Err(ConfigError(format!("{other} has no duration model"))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        use ExecutionState::*;
        for phase in [Navigating, Searching, Grasping, Delivering, Recovering] {
            let cfg = self.phase(phase)?;
            let err = |msg: String| ConfigError(format!("{}: {msg}", phase.as_str().to_lowercase()));
            cfg.duration.validate().map_err(err)?;
            if !(0.0..=1.0).contains(&cfg.failure_probability) {
                return Err(err(format!(
                    "failure_probability {} outside [0, 1]",
                    cfg.failure_probability
                )));
            }
            if cfg.failure_probability > 0.0 {
                let total: f64 = cfg.category_weights.values().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(err(format!("category weights sum to {total}, not 1")));
                }
            }
            for (&category, &w) in &cfg.category_weights {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(err(format!("weight for {category} must be >= 0")));
                }
                let allowed = match category {
                    FailureCategory::NavigationError => matches!(phase, Navigating | Delivering),
                    FailureCategory::GraspFailure => phase == Grasping,
                    _ => true,
                };
                if !allowed && w > 0.0 {
                    return Err(err(format!("{category} cannot occur in this phase")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.grasp_success_probability) {
            return Err(ConfigError(format!(
                "grasp_success_probability {} outside [0, 1]",
                self.grasp_success_probability
            )));
        }
        if self.grasp_attempt_cap == 0 {
            return Err(ConfigError("grasp_attempt_cap must be >= 1".into()));
        }
        if !(self.time_scale.is_finite() && self.time_scale >= 0.0) {
            return Err(ConfigError(format!("time_scale must be >= 0, got {}", self.time_scale)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: SimConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every phase succeeds and every grasp lands first time.
    pub fn failfree() -> Self {
        SimConfig {
            navigating: PhaseConfig::reliable(LogNormalSpec::new(38.0, 0.3)),
            searching: PhaseConfig::reliable(LogNormalSpec::new(22.0, 0.3)),
            grasping: PhaseConfig::reliable(LogNormalSpec::new(14.0, 0.3)),
            delivering: PhaseConfig::reliable(LogNormalSpec::new(38.0, 0.3)),
            recovering: PhaseConfig::reliable(LogNormalSpec::new(15.0, 0.3)),
            grasp_success_probability: 1.0,
            grasp_attempt_cap: 3,
            max_retries: DEFAULT_MAX_RETRIES,
            time_scale: 0.0,
            rng_seed: 42,
        }
    }

    /// Calibrated against the aggregate execution-time and grasp-attempt
    /// means used as calibration targets.
    pub fn paper_cal() -> Self {
        use FailureCategory::*;
        SimConfig {
            navigating: PhaseConfig::failing(
                LogNormalSpec::new(39.0, 0.5),
                0.08,
                &[(NavigationError, 0.7), (SystemHang, 0.2), (Other, 0.1)],
            ),
            searching: PhaseConfig::failing(
                LogNormalSpec::new(20.0, 0.45),
                0.05,
                &[(SystemHang, 0.4), (MediatorError, 0.3), (Other, 0.3)],
            ),
            grasping: PhaseConfig::failing(
                LogNormalSpec::new(13.0, 0.45),
                0.04,
                &[(GraspFailure, 0.5), (SystemHang, 0.3), (Other, 0.2)],
            ),
            delivering: PhaseConfig::failing(
                LogNormalSpec::new(36.0, 0.45),
                0.05,
                &[(NavigationError, 0.7), (SystemHang, 0.2), (Other, 0.1)],
            ),
            recovering: PhaseConfig::failing(LogNormalSpec::new(25.0, 0.5), 0.45, &[(SystemHang, 0.6), (Other, 0.4)]),
            grasp_success_probability: 0.5,
            grasp_attempt_cap: 3,
            max_retries: DEFAULT_MAX_RETRIES,
            time_scale: 0.0,
            rng_seed: 42,
        }
    }
}
