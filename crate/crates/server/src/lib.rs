//! Coordination server between users and the execution agent.
//!
//! [`Coordinator`] owns every session log and task machine; [`http`] exposes
//! it over the public and agent-side endpoints.

pub mod config;
pub mod coordinator;
pub mod http;
pub mod intent;

pub use config::ServerConfig;
pub use coordinator::{AgentStatus, CoordError, Coordinator, Session};
pub use http::{router, serve, shared, Shared};
pub use intent::{parse_intent, NoIntent};
