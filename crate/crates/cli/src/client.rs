//! HTTP client for the public session endpoints, plus the scripted
//! participant that drives one trial.

use futures::{Stream, StreamExt};
use rand::Rng;
use reqwest::{Client, StatusCode};
use statebridge_core::mediator::ScriptedUser;
use statebridge_core::protocol::api::{Confirm, CreateSession, ErrorBody, SessionCreated, SubmitTask, TaskSubmitted};
use statebridge_core::protocol::{decode_event, EventKind, ObjectKind, Payload, ProtocolError, StreamEvent};
use statebridge_core::trial::{Condition, TrialRecord};
use statebridge_server::intent::synonyms;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Status {
        status: StatusCode,
        code: Option<String>,
        message: String,
    },
    #[error("stream: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("stream closed before the task finished")]
    StreamClosed,
}

impl ClientError {
    /// Machine-readable error code from the server's error body.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Status { code, .. } => code.as_deref(),
            _ => None,
        }
    }
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
    if resp.status().is_success() {
        Ok(resp)
    } else {
        let status = resp.status();
        let body = resp.text().await.unwrap_or_default();
        let (code, message) = match serde_json::from_str::<ErrorBody>(&body) {
            Ok(b) => (Some(b.error), b.message),
            Err(_) => (None, body),
        };
        Err(ClientError::Status { status, code, message })
    }
}

#[derive(Debug, Clone)]
pub struct SessionClient {
    http: Client,
    base_url: String,
}

impl SessionClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        SessionClient {
            http: Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub async fn create_session(&self, req: &CreateSession) -> Result<String, ClientError> {
        let resp = self
            .http
            .post(format!("{}/api/v1/sessions", self.base_url))
            .json(req)
            .send()
            .await?;
        Ok(check(resp).await?.json::<SessionCreated>().await?.session_id)
    }

    pub async fn submit(&self, session_id: &str, req: &SubmitTask) -> Result<TaskSubmitted, ClientError> {
        let resp = self
            .http
            .post(format!("{}/api/v1/sessions/{session_id}/tasks", self.base_url))
            .json(req)
            .send()
            .await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn confirm(&self, task_id: &str, req: &Confirm) -> Result<(), ClientError> {
        let resp = self
            .http
            .post(format!("{}/api/v1/tasks/{task_id}/confirm", self.base_url))
            .json(req)
            .send()
            .await?;
        check(resp).await?;
        Ok(())
    }

    /// Full session transcript as encoded lines.
    pub async fn transcript(&self, session_id: &str) -> Result<String, ClientError> {
        let resp = self
            .http
            .get(format!("{}/api/v1/sessions/{session_id}/events", self.base_url))
            .send()
            .await?;
        Ok(check(resp).await?.text().await?)
    }

    pub async fn session_trials(&self, session_id: &str) -> Result<Vec<TrialRecord>, ClientError> {
        let resp = self
            .http
            .get(format!("{}/api/v1/sessions/{session_id}/trials", self.base_url))
            .send()
            .await?;
        Ok(check(resp).await?.json().await?)
    }

    /// Follows the session's event stream from `from_seq`.
    pub async fn subscribe(
        &self,
        session_id: &str,
        view: &str,
        from_seq: u64,
    ) -> Result<impl Stream<Item = Result<StreamEvent, ClientError>> + Unpin + use<>, ClientError> {
        let resp = self
            .http
            .get(format!(
                "{}/api/v1/sessions/{session_id}/stream?view={view}&from_seq={from_seq}",
                self.base_url
            ))
            .send()
            .await?;
        Ok(lines(check(resp).await?.bytes_stream()))
    }
}

/// Splits a chunked body into decoded events.
fn lines<S, B>(body: S) -> impl Stream<Item = Result<StreamEvent, ClientError>> + Unpin
where
    S: Stream<Item = Result<B, reqwest::Error>> + Unpin,
    B: AsRef<[u8]>,
{
    let state = (body, Vec::<u8>::new(), false);
    Box::pin(futures::stream::unfold(state, |(mut body, mut buf, done)| async move {
        if done {
            return None;
        }
        loop {
            if let Some(i) = buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = buf.drain(..=i).collect();
                let text = String::from_utf8_lossy(&line[..line.len() - 1]).into_owned();
                return Some((decode_event(&text).map_err(ClientError::from), (body, buf, false)));
            }
            match body.next().await {
                Some(Ok(chunk)) => buf.extend_from_slice(chunk.as_ref()),
                Some(Err(e)) => return Some((Err(e.into()), (body, buf, true))),
                None => return None,
            }
        }
    }))
}

const PHRASES: [&str; 4] = [
    "Could you bring me some {w}?",
    "I'd like {w}, please.",
    "Please get me {w} from the kitchen.",
    "Can you fetch {w} for me?",
];

/// A spoken request for `object` with wording drawn from `rng`.
pub fn compose_utterance<R: Rng + ?Sized>(object: ObjectKind, rng: &mut R) -> String {
    let words: Vec<&str> = synonyms(object).collect();
    let word = words[rng.random_range(0..words.len())];
    PHRASES[rng.random_range(0..PHRASES.len())].replace("{w}", word)
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    pub session_id: String,
    pub task_id: String,
    pub events: Vec<StreamEvent>,
}

/// Runs the single trial of `session_id`: the scripted participant speaks a
/// request, answers the pre-dispatch prompt and any confirmation requests,
/// and follows the stream until the final message.
pub async fn run_trial(
    client: &SessionClient,
    session_id: &str,
    condition: Condition,
    user: &mut ScriptedUser,
) -> Result<TrialRun, ClientError> {
    let mut stream = client.subscribe(session_id, "full", 1).await?;

    let object = user.choose_object();
    let utterance = compose_utterance(object, user.rng());
    let submitted = loop {
        let req = SubmitTask {
            utterance: utterance.clone(),
            request_latency_ms: Some(user.request_latency_ms()),
            confirmation: (condition == Condition::External).then(|| user.pre_dispatch_reply()),
        };
        match client.submit(session_id, &req).await {
            Ok(s) => break s,
            // the declined exchange counts toward initiation; ask again
            Err(e) if e.code() == Some("TASK_DECLINED") => continue,
            Err(e) => return Err(e),
        }
    };

    let mut events = Vec::new();
    let mut finished = false;
    while let Some(event) = stream.next().await {
        let event = event?;
        match &event.payload {
            Payload::ConfirmationRequest { .. } if event.task_id == submitted.task_id => {
                let (decision, latency_ms) = user.answer_confirmation();
                client
                    .confirm(
                        &submitted.task_id,
                        &Confirm {
                            decision,
                            latency_ms: Some(latency_ms),
                        },
                    )
                    .await?;
            }
            Payload::TaskResult { .. } => finished = true,
            _ => {}
        }
        let last = finished && event.kind() == EventKind::Externalization;
        events.push(event);
        if last {
            return Ok(TrialRun {
                session_id: session_id.to_string(),
                task_id: submitted.task_id,
                events,
            });
        }
    }
    Err(ClientError::StreamClosed)
}
