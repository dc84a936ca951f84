//! Agent process speaking the server's `/agent/v1` endpoints.

use std::future::Future;
use std::time::Duration;

use reqwest::{Client, StatusCode};
use statebridge_core::protocol::api::{AgentDirective, AgentDispatch, AgentStateUpdate, ErrorBody};

use crate::config::SimConfig;
use crate::runner::{run_task, AgentLink, SimError, SimOutcome};

const POLL_WAIT_MS: u64 = 10_000;

fn unreachable(e: reqwest::Error) -> SimError {
    SimError::ServerUnreachable(e.to_string())
}

#[derive(Debug, Clone)]
pub struct HttpAgent {
    client: Client,
    base_url: String,
    time_scale: f64,
    /// Virtual time already paced out in wall time.
    paced_ts: u64,
}

impl HttpAgent {
    pub fn new(base_url: impl Into<String>, time_scale: f64) -> Self {
        HttpAgent {
            client: Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            time_scale,
            paced_ts: 0,
        }
    }

    pub async fn register(&self) -> Result<(), SimError> {
        self.client
            .post(format!("{}/agent/v1/register", self.base_url))
            .send()
            .await
            .map_err(unreachable)?
            .error_for_status()
            .map_err(unreachable)?;
        Ok(())
    }

    /// Long-polls for the next dispatched task.
    pub async fn next_task(&self, wait_ms: u64) -> Result<Option<AgentDispatch>, SimError> {
        let resp = self
            .client
            .get(format!("{}/agent/v1/next?wait_ms={wait_ms}", self.base_url))
            .send()
            .await
            .map_err(unreachable)?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        let resp = resp.error_for_status().map_err(unreachable)?;
        resp.json().await.map(Some).map_err(unreachable)
    }

    async fn pace(&mut self, ts_ms: u64) {
        if self.time_scale > 0.0 && ts_ms > self.paced_ts {
            let wall = (ts_ms - self.paced_ts) as f64 / self.time_scale;
            tokio::time::sleep(Duration::from_secs_f64(wall / 1000.0)).await;
        }
        self.paced_ts = self.paced_ts.max(ts_ms);
    }

    pub async fn execute(&mut self, dispatch: &AgentDispatch, config: &SimConfig) -> Result<SimOutcome, SimError> {
        self.paced_ts = dispatch.dispatch_ts_ms;
        run_task(
            self,
            &dispatch.task_id,
            &dispatch.intent,
            config,
            dispatch.dispatch_ts_ms,
        )
        .await
    }
}

impl AgentLink for HttpAgent {
    fn report(&mut self, task_id: &str, update: AgentStateUpdate) -> impl Future<Output = Result<(), SimError>> + Send {
        let url = format!("{}/agent/v1/tasks/{task_id}/state", self.base_url);
        async move {
            self.pace(update.ts_ms.unwrap_or(0)).await;
            let resp = self.client.post(url).json(&update).send().await.map_err(unreachable)?;
            if resp.status().is_success() {
                return Ok(());
            }
            let message = match resp.json::<ErrorBody>().await {
                Ok(body) => body.message,
                Err(e) => e.to_string(),
            };
            Err(SimError::Rejected {
                from: update.from,
                to: update.to,
                message,
            })
        }
    }

    fn await_decision(&mut self, task_id: &str) -> impl Future<Output = Result<AgentDirective, SimError>> + Send {
        let url = format!(
            "{}/agent/v1/tasks/{task_id}/decision?wait_ms={POLL_WAIT_MS}",
            self.base_url
        );
        async move {
            loop {
                let resp = self.client.get(&url).send().await.map_err(unreachable)?;
                if resp.status() == StatusCode::NO_CONTENT {
                    continue;
                }
                let directive: AgentDirective = resp
                    .error_for_status()
                    .map_err(unreachable)?
                    .json()
                    .await
                    .map_err(unreachable)?;
                // the wait already happened in wall time
                self.paced_ts = self.paced_ts.max(directive.ts_ms);
                return Ok(directive);
            }
        }
    }
}

/// Registers with the server and executes dispatched tasks one at a time.
/// Stops after `max_tasks` tasks when given, otherwise runs until the server
/// goes away.
pub async fn run_agent(
    base_url: &str,
    config: &SimConfig,
    max_tasks: Option<usize>,
) -> Result<Vec<SimOutcome>, SimError> {
    config.validate()?;
    let mut agent = HttpAgent::new(base_url, config.time_scale);
    agent.register().await?;
    let mut outcomes = Vec::new();
    while max_tasks.is_none_or(|n| outcomes.len() < n) {
        let Some(dispatch) = agent.next_task(POLL_WAIT_MS).await? else {
            continue;
        };
        match agent.execute(&dispatch, config).await {
            Ok(outcome) => outcomes.push(outcome),
            Err(SimError::Rejected { from, to, message }) => {
                // the server faults the task; keep serving others
                tracing::error!(task_id = %dispatch.task_id, %from, %to, "report rejected: {message}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(outcomes)
}
