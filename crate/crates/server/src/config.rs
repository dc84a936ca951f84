use std::path::PathBuf;
use std::time::Duration;

use statebridge_core::mediator::{TemplateError, Templates, UserAgentPolicy};
use statebridge_core::state::DEFAULT_MAX_RETRIES;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub max_retries: u32,
    /// Wall seconds to virtual seconds for latencies measured on the server.
    pub time_scale: f64,
    /// Unanswered confirmation requests abort after this long; `None` waits
    /// forever.
    pub confirm_timeout: Option<Duration>,
    pub templates_path: Option<PathBuf>,
    pub trial_log: Option<PathBuf>,
    /// Answers the pre-dispatch prompt when a submission carries no reply.
    pub user: UserAgentPolicy,
    pub user_seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_retries: DEFAULT_MAX_RETRIES,
            time_scale: 1.0,
            confirm_timeout: None,
            templates_path: None,
            trial_log: None,
            user: UserAgentPolicy::default(),
            user_seed: 0,
        }
    }
}

impl ServerConfig {
    pub fn load_templates(&self) -> Result<Templates, TemplateError> {
        match &self.templates_path {
            Some(path) => Templates::load(path),
            None => Ok(Templates::default()),
        }
    }
}
