//! Simulated mobile-manipulation agent. Walks a task through its phases on a
//! virtual clock and reports each milestone to the coordination server.

pub mod agent;
pub mod config;
pub mod runner;
pub mod sample;

pub use agent::{run_agent, HttpAgent};
pub use config::{ConfigError, PhaseConfig, SimConfig};
pub use runner::{run_task, task_seed, AgentLink, OfflineLink, SimError, SimOutcome, SimTransition};
pub use sample::{grasp_loop, inject_failure, sample_phase_duration};
