//! Random draws for one phase. Each function consumes a fixed number of
//! variates per call so two runs with the same seed stay aligned even when
//! their outcomes diverge.

use rand::Rng;
use statebridge_core::state::{ExecutionState, FailureCategory};

use crate::config::{ConfigError, SimConfig};

pub fn sample_phase_duration<R: Rng + ?Sized>(
    phase: ExecutionState,
    config: &SimConfig,
    rng: &mut R,
) -> Result<u64, ConfigError> {
    let spec = config.phase(phase)?.duration;
    spec.validate().map_err(ConfigError)?;
    Ok(spec.sample_ms(rng))
}

/// Draws whether `phase` fails and, if so, its category. Always consumes two
/// uniforms.
pub fn inject_failure<R: Rng + ?Sized>(
    phase: ExecutionState,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Option<FailureCategory>, ConfigError> {
    let cfg = config.phase(phase)?;
    let fails = rng.random::<f64>() < cfg.failure_probability;
    let pick = rng.random::<f64>();
    if !fails {
        return Ok(None);
    }
    let total: f64 = cfg.category_weights.values().sum();
    if total <= 0.0 {
        return Err(ConfigError(format!("{phase} can fail but has no category weights")));
    }
    let mut acc = 0.0;
    let mut last = None;
    for (&category, &w) in &cfg.category_weights {
        if w <= 0.0 {
            continue;
        }
        acc += w / total;
        last = Some(category);
        if pick < acc {
            return Ok(Some(category));
        }
    }
    Ok(last)
}

/// Independent attempts with success probability `p` until one lands or
/// `cap` attempts have been made.
pub fn grasp_loop<R: Rng + ?Sized>(p: f64, cap: u32, rng: &mut R) -> (bool, u32) {
    for attempt in 1..=cap {
        if rng.random::<f64>() < p {
            return (true, attempt);
        }
    }
    (false, cap)
}
