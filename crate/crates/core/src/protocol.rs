//! Line-oriented wire protocol.
//!
//! Every [`StreamEvent`] renders as one JSON object on one line with the keys
//! `seq`, `ts_ms`, `session_id`, `task_id`, `kind`, `payload` in that order.
//! Payload keys are fixed per kind; nullable keys are always present.
//!
//! ```text
//! {"seq":3,"ts_ms":41250,"session_id":"s0001","task_id":"s0001-t1","kind":"STATE_TRANSITION","payload":{"from":"NAVIGATING","to":"SEARCHING","failure_category":null}}
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::state::{ExecutionState, FailureCategory, Outcome, UnknownName};
use crate::trial::Condition;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("malformed line: {0}")]
    Parse(String),
    #[error("unknown event kind `{0}`")]
    UnknownKind(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectKind {
    Water,
    Chips,
    Fruit,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [ObjectKind::Water, ObjectKind::Chips, ObjectKind::Fruit];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Water => "WATER",
            ObjectKind::Chips => "CHIPS",
            ObjectKind::Fruit => "FRUIT",
        }
    }

    /// Noun used in user-facing sentences.
    pub fn noun(self) -> &'static str {
        match self {
            ObjectKind::Water => "water",
            ObjectKind::Chips => "chips",
            ObjectKind::Fruit => "fruit",
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectKind {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| UnknownName(s.to_string()))
    }
}

/// Structured retrieval request parsed from an utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskIntent {
    pub object: ObjectKind,
    pub deliver_to: String,
    pub raw_utterance: String,
}

impl TaskIntent {
    pub fn new(object: ObjectKind, raw_utterance: impl Into<String>) -> Self {
        TaskIntent {
            object,
            deliver_to: "user".to_string(),
            raw_utterance: raw_utterance.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Retry,
    Abort,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Retry => "RETRY",
            Decision::Abort => "ABORT",
        })
    }
}

/// User-facing rendering of a state change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalizationMessage {
    pub text: String,
    pub progress: f64,
    pub state: ExecutionState,
    pub requires_response: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    StateTransition,
    Externalization,
    ConfirmationRequest,
    ConfirmationResponse,
    TaskResult,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::StateTransition,
        EventKind::Externalization,
        EventKind::ConfirmationRequest,
        EventKind::ConfirmationResponse,
        EventKind::TaskResult,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::StateTransition => "STATE_TRANSITION",
            EventKind::Externalization => "EXTERNALIZATION",
            EventKind::ConfirmationRequest => "CONFIRMATION_REQUEST",
            EventKind::ConfirmationResponse => "CONFIRMATION_RESPONSE",
            EventKind::TaskResult => "TASK_RESULT",
        }
    }

    fn payload_keys(self) -> &'static [&'static str] {
        match self {
            EventKind::StateTransition => &["from", "to", "failure_category"],
            EventKind::Externalization => &["text", "progress", "state", "requires_response"],
            EventKind::ConfirmationRequest => &["failure_category", "resume_from", "retries_used", "max_retries"],
            EventKind::ConfirmationResponse => &["decision", "latency_ms"],
            EventKind::TaskResult => &["outcome", "failure_category", "grasp_attempts"],
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    StateTransition {
        from: ExecutionState,
        to: ExecutionState,
        failure_category: Option<FailureCategory>,
    },
    Externalization(ExternalizationMessage),
    ConfirmationRequest {
        failure_category: FailureCategory,
        resume_from: ExecutionState,
        retries_used: u32,
        max_retries: u32,
    },
    ConfirmationResponse {
        decision: Decision,
        latency_ms: u64,
    },
    TaskResult {
        outcome: Outcome,
        grasp_attempts: u32,
    },
}

impl Payload {
    pub fn kind(&self) -> EventKind {
        match self {
            Payload::StateTransition { .. } => EventKind::StateTransition,
            Payload::Externalization(_) => EventKind::Externalization,
            Payload::ConfirmationRequest { .. } => EventKind::ConfirmationRequest,
            Payload::ConfirmationResponse { .. } => EventKind::ConfirmationResponse,
            Payload::TaskResult { .. } => EventKind::TaskResult,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Payload::StateTransition {
                from,
                to,
                failure_category,
            } => {
                if !from.can_transition_to(*to) {
                    return Err(format!("{from} -> {to} is not an edge of the state graph"));
                }
                if failure_category.is_some() != (*to == ExecutionState::Failed) {
                    return Err("failure_category must be set exactly when entering FAILED".into());
                }
            }
            Payload::Externalization(msg) => {
                if !(0.0..=1.0).contains(&msg.progress) {
                    return Err(format!("progress {} outside [0, 1]", msg.progress));
                }
                if msg.requires_response && msg.state != ExecutionState::Failed {
                    return Err("only failure notifications may require a response".into());
                }
            }
            Payload::ConfirmationRequest {
                resume_from,
                retries_used,
                max_retries,
                ..
            } => {
                if !resume_from.is_active_phase() {
                    return Err(format!("resume_from {resume_from} is not an active phase"));
                }
                if retries_used > max_retries {
                    return Err("retries_used exceeds max_retries".into());
                }
            }
            Payload::ConfirmationResponse { .. } | Payload::TaskResult { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub seq: u64,
    pub ts_ms: u64,
    pub session_id: String,
    pub task_id: String,
    pub payload: Payload,
}

impl StreamEvent {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }

    pub fn is_terminal(&self) -> bool {
        self.kind() == EventKind::TaskResult
    }
}

// Serialization mirrors of the payloads; field order is the wire order.

#[derive(Serialize)]
struct WireEvent<'a> {
    seq: u64,
    ts_ms: u64,
    session_id: &'a str,
    task_id: &'a str,
    kind: EventKind,
    payload: WirePayload<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum WirePayload<'a> {
    StateTransition(StateTransitionBody),
    Externalization(&'a ExternalizationMessage),
    ConfirmationRequest(ConfirmationRequestBody),
    ConfirmationResponse(ConfirmationResponseBody),
    TaskResult(TaskResultBody),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateTransitionBody {
    from: ExecutionState,
    to: ExecutionState,
    failure_category: Option<FailureCategory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfirmationRequestBody {
    failure_category: FailureCategory,
    resume_from: ExecutionState,
    retries_used: u32,
    max_retries: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfirmationResponseBody {
    decision: Decision,
    latency_ms: u64,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
enum OutcomeLabel {
    Success,
    Failure,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskResultBody {
    outcome: OutcomeLabel,
    failure_category: Option<FailureCategory>,
    grasp_attempts: u32,
}

/// Renders one event as a single line (no trailing newline).
pub fn encode_event(event: &StreamEvent) -> Result<String, ProtocolError> {
    event.payload.validate().map_err(ProtocolError::InvalidEvent)?;
    let payload = match &event.payload {
        Payload::StateTransition {
            from,
            to,
            failure_category,
        } => WirePayload::StateTransition(StateTransitionBody {
            from: *from,
            to: *to,
            failure_category: *failure_category,
        }),
        Payload::Externalization(msg) => WirePayload::Externalization(msg),
        Payload::ConfirmationRequest {
            failure_category,
            resume_from,
            retries_used,
            max_retries,
        } => WirePayload::ConfirmationRequest(ConfirmationRequestBody {
            failure_category: *failure_category,
            resume_from: *resume_from,
            retries_used: *retries_used,
            max_retries: *max_retries,
        }),
        Payload::ConfirmationResponse { decision, latency_ms } => {
            WirePayload::ConfirmationResponse(ConfirmationResponseBody {
                decision: *decision,
                latency_ms: *latency_ms,
            })
        }
        Payload::TaskResult {
            outcome,
            grasp_attempts,
        } => WirePayload::TaskResult(TaskResultBody {
            outcome: if outcome.is_success() {
                OutcomeLabel::Success
            } else {
                OutcomeLabel::Failure
            },
            failure_category: outcome.failure_category(),
            grasp_attempts: *grasp_attempts,
        }),
    };
    let wire = WireEvent {
        seq: event.seq,
        ts_ms: event.ts_ms,
        session_id: &event.session_id,
        task_id: &event.task_id,
        kind: event.kind(),
        payload,
    };
    serde_json::to_string(&wire).map_err(|e| ProtocolError::InvalidEvent(e.to_string()))
}

const ENVELOPE_KEYS: [&str; 6] = ["seq", "ts_ms", "session_id", "task_id", "kind", "payload"];

fn check_keys(obj: &Map<String, Value>, expected: &[&str], what: &str) -> Result<(), ProtocolError> {
    for key in expected {
        if !obj.contains_key(*key) {
            return Err(ProtocolError::SchemaViolation(format!("{what}: missing `{key}`")));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !expected.contains(&k.as_str())) {
        return Err(ProtocolError::SchemaViolation(format!("{what}: unexpected `{extra}`")));
    }
    Ok(())
}

fn field<T: serde::de::DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<T, ProtocolError> {
    serde_json::from_value(obj[key].clone()).map_err(|e| ProtocolError::SchemaViolation(format!("`{key}`: {e}")))
}

fn body<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, ProtocolError> {
    serde_json::from_value(value).map_err(|e| ProtocolError::SchemaViolation(e.to_string()))
}

/// Parses one line produced by [`encode_event`].
pub fn decode_event(line: &str) -> Result<StreamEvent, ProtocolError> {
    let value: Value =
        serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(ProtocolError::Parse("event is not an object".into()));
    };

    let kind_name = match obj.get("kind") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ProtocolError::SchemaViolation("`kind` is not a string".into())),
        None => return Err(ProtocolError::SchemaViolation("envelope: missing `kind`".into())),
    };
    let kind = EventKind::ALL
        .into_iter()
        .find(|k| k.as_str() == kind_name)
        .ok_or(ProtocolError::UnknownKind(kind_name))?;
    check_keys(&obj, &ENVELOPE_KEYS, "envelope")?;

    let seq: u64 = field(&obj, "seq")?;
    let ts_ms: u64 = field(&obj, "ts_ms")?;
    let session_id: String = field(&obj, "session_id")?;
    let task_id: String = field(&obj, "task_id")?;

    let payload_value = obj.remove("payload").unwrap_or(Value::Null);
    let Value::Object(payload_obj) = &payload_value else {
        return Err(ProtocolError::SchemaViolation("`payload` is not an object".into()));
    };
    check_keys(payload_obj, kind.payload_keys(), kind.as_str())?;

    let payload = match kind {
        EventKind::StateTransition => {
            let b: StateTransitionBody = body(payload_value)?;
            Payload::StateTransition {
                from: b.from,
                to: b.to,
                failure_category: b.failure_category,
            }
        }
        EventKind::Externalization => Payload::Externalization(body(payload_value)?),
        EventKind::ConfirmationRequest => {
            let b: ConfirmationRequestBody = body(payload_value)?;
            Payload::ConfirmationRequest {
                failure_category: b.failure_category,
                resume_from: b.resume_from,
                retries_used: b.retries_used,
                max_retries: b.max_retries,
            }
        }
        EventKind::ConfirmationResponse => {
            let b: ConfirmationResponseBody = body(payload_value)?;
            Payload::ConfirmationResponse {
                decision: b.decision,
                latency_ms: b.latency_ms,
            }
        }
        EventKind::TaskResult => {
            let b: TaskResultBody = body(payload_value)?;
            let outcome = match (b.outcome, b.failure_category) {
                (OutcomeLabel::Success, None) => Outcome::Success,
                (OutcomeLabel::Failure, Some(c)) => Outcome::Failure(c),
                _ => {
                    return Err(ProtocolError::SchemaViolation(
                        "failure_category must be set exactly for FAILURE outcomes".into(),
                    ))
                }
            };
            Payload::TaskResult {
                outcome,
                grasp_attempts: b.grasp_attempts,
            }
        }
    };
    payload.validate().map_err(ProtocolError::SchemaViolation)?;

    Ok(StreamEvent {
        seq,
        ts_ms,
        session_id,
        task_id,
        payload,
    })
}

/// Decodes a newline-delimited transcript, skipping blank lines.
pub fn decode_transcript(text: &str) -> Result<Vec<StreamEvent>, ProtocolError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(decode_event)
        .collect()
}

/// Encodes events one per line, each terminated by `\n`.
pub fn encode_transcript(events: &[StreamEvent]) -> Result<String, ProtocolError> {
    let mut out = String::new();
    for event in events {
        out.push_str(&encode_event(event)?);
        out.push('\n');
    }
    Ok(out)
}

/// JSON bodies of the HTTP endpoints.
pub mod api {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CreateSession {
        pub participant_id: String,
        pub condition: Condition,
        pub period: u8,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SessionCreated {
        pub session_id: String,
    }

    /// Answer to the mediator's pre-dispatch prompt supplied up front by a
    /// scripted client.
    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    pub struct PreDispatchReply {
        pub accept: bool,
        pub latency_ms: u64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SubmitTask {
        pub utterance: String,
        /// Virtual time the user spent issuing the request.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub request_latency_ms: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub confirmation: Option<PreDispatchReply>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct TaskSubmitted {
        pub task_id: String,
        pub intent: TaskIntent,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Confirm {
        pub decision: Decision,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub latency_ms: Option<u64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct AgentDispatch {
        pub task_id: String,
        pub session_id: String,
        pub intent: TaskIntent,
        pub dispatch_ts_ms: u64,
        pub max_retries: u32,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct AgentStateUpdate {
        pub from: ExecutionState,
        pub to: ExecutionState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub failure_category: Option<FailureCategory>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub ts_ms: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub grasp_attempts: Option<u32>,
    }

    /// Recovery decision relayed to the agent after a failure.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AgentDirective {
        pub decision: Decision,
        pub ts_ms: u64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub error: String,
        pub message: String,
    }
}
