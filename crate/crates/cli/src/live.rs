//! Interactive session paced in wall time. Utterances and retry/abort
//! answers come from stdin; the user-facing stream is printed as it arrives.

use std::io::Write;
use std::sync::{Arc, Mutex};

use futures::StreamExt;
use statebridge_core::protocol::api::{Confirm, CreateSession, SubmitTask};
use statebridge_core::protocol::{Decision, Payload, StreamEvent};
use statebridge_core::trial::Condition;
use statebridge_server::{shared, Coordinator};
use statebridge_sim::{run_agent, HttpAgent, SimConfig};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::sync::Notify;

use crate::client::{ClientError, SessionClient};
use crate::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("address {0} is already in use")]
    PortInUse(std::net::SocketAddr),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub condition: Condition,
    /// Submitted right away, before reading stdin.
    pub utterance: Option<String>,
}

#[derive(Debug, Default)]
struct LiveState {
    active: bool,
    result_seen: bool,
    pending_confirmation: Option<String>,
}

pub fn describe(event: &StreamEvent) -> Option<String> {
    let clock = format!("[{:>7.1}s]", event.ts_ms as f64 / 1000.0);
    match &event.payload {
        Payload::Externalization(m) => Some(format!(
            "{clock} {:<10} {:>3.0}%  {}",
            m.state.as_str(),
            m.progress * 100.0,
            m.text
        )),
        Payload::ConfirmationRequest {
            failure_category,
            retries_used,
            max_retries,
            ..
        } => Some(format!(
            "{clock} failure: {failure_category} (retries used {retries_used}/{max_retries}); type `retry` or `abort`"
        )),
        Payload::ConfirmationResponse { decision, .. } => Some(format!("{clock} answered {decision}")),
        Payload::TaskResult {
            outcome,
            grasp_attempts,
        } => Some(format!(
            "{clock} result: {outcome:?} after {grasp_attempts} grasp attempt(s)"
        )),
        Payload::StateTransition { .. } => None,
    }
}

pub async fn run_live(config: &ExperimentConfig, opts: &LiveOptions) -> Result<(), LiveError> {
    let mut sim: SimConfig = config.sim.clone();
    if sim.time_scale <= 0.0 {
        sim.time_scale = 1.0;
    }
    let mut server_config = config.server_config(None);
    server_config.time_scale = sim.time_scale;
    let coordinator = Coordinator::new(server_config).map_err(|e| LiveError::Setup(e.to_string()))?;
    let listener = match tokio::net::TcpListener::bind(config.server.listen).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(LiveError::PortInUse(config.server.listen)),
        Err(e) => return Err(e.into()),
    };
    let base_url = format!("http://{}", listener.local_addr()?);
    let server = tokio::spawn(statebridge_server::serve(listener, shared(coordinator)));
    HttpAgent::new(&base_url, sim.time_scale)
        .register()
        .await
        .map_err(|e| LiveError::Setup(e.to_string()))?;
    let agent = {
        let url = base_url.clone();
        tokio::spawn(async move {
            if let Err(e) = run_agent(&url, &sim, None).await {
                tracing::error!("agent stopped: {e}");
            }
        })
    };

    let client = SessionClient::new(&base_url);
    let session_id = client
        .create_session(&CreateSession {
            participant_id: "LIVE".into(),
            condition: opts.condition,
            period: 1,
        })
        .await?;
    println!("session {session_id} ({})", opts.condition);
    println!("stream  {base_url}/api/v1/sessions/{session_id}/stream");
    println!("confirm {base_url}/api/v1/tasks/{{task_id}}/confirm");
    std::io::stdout().flush()?;

    let state = Arc::new(Mutex::new(LiveState::default()));
    let finished = Arc::new(Notify::new());
    let printer = {
        let mut stream = client.subscribe(&session_id, "user", 1).await?;
        let state = state.clone();
        let finished = finished.clone();
        tokio::spawn(async move {
            while let Some(Ok(event)) = stream.next().await {
                if let Some(line) = describe(&event) {
                    println!("{line}");
                    let _ = std::io::stdout().flush();
                }
                let mut s = state.lock().expect("live state");
                match event.payload {
                    Payload::ConfirmationRequest { .. } => s.pending_confirmation = Some(event.task_id.clone()),
                    Payload::ConfirmationResponse { .. } => s.pending_confirmation = None,
                    Payload::TaskResult { .. } => {
                        s.pending_confirmation = None;
                        s.result_seen = true;
                    }
                    // the closing message follows the result
                    Payload::Externalization(_) if s.result_seen => {
                        s.active = false;
                        s.result_seen = false;
                        finished.notify_one();
                    }
                    _ => {}
                }
            }
        })
    };

    let submit = |utterance: String| {
        let client = client.clone();
        let session_id = session_id.clone();
        let state = state.clone();
        async move {
            let req = SubmitTask {
                utterance,
                request_latency_ms: None,
                confirmation: None,
            };
            // marked before the request so a fast task cannot finish unseen
            let was_active = std::mem::replace(&mut state.lock().expect("live state").active, true);
            match client.submit(&session_id, &req).await {
                Ok(task) => println!("dispatched {} ({})", task.task_id, task.intent.object),
                Err(e) => {
                    state.lock().expect("live state").active = was_active;
                    println!("not dispatched: {e}");
                }
            }
        }
    };

    if let Some(u) = opts.utterance.clone() {
        submit(u).await;
    }
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    while let Some(line) = lines.next_line().await? {
        let line = line.trim().to_string();
        if line.is_empty() {
            continue;
        }
        let pending = state.lock().expect("live state").pending_confirmation.clone();
        let decision = match line.to_ascii_lowercase().as_str() {
            "retry" | "r" => Some(Decision::Retry),
            "abort" | "a" => Some(Decision::Abort),
            _ => None,
        };
        match (decision, pending) {
            (Some(decision), Some(task_id)) => {
                if let Err(e) = client
                    .confirm(
                        &task_id,
                        &Confirm {
                            decision,
                            latency_ms: None,
                        },
                    )
                    .await
                {
                    println!("confirmation not accepted: {e}");
                }
            }
            (Some(_), None) => println!("nothing is waiting for a decision"),
            (None, _) => {
                submit(line).await;
            }
        }
    }
    // stdin closed: let the running task finish
    while state.lock().expect("live state").active {
        finished.notified().await;
    }
    printer.abort();
    agent.abort();
    server.abort();
    Ok(())
}
