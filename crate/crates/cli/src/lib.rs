//! Experiment orchestration: counterbalanced batches over the real server
//! and simulated agent, live sessions, and report generation.

pub mod batch;
pub mod client;
pub mod config;
pub mod live;

pub use batch::{run_batch, BatchError, BatchOptions, BatchResult, SessionTranscript, Stack};
pub use client::{compose_utterance, run_trial, ClientError, SessionClient};
pub use config::{ConfigError, ExperimentConfig};
pub use live::{run_live, LiveError, LiveOptions};
