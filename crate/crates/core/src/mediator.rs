//! Externalization policy: which state changes reach the user, how they are
//! phrased, and the scripted stand-in for a participant.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::LogNormalSpec;
use crate::protocol::api::PreDispatchReply;
use crate::protocol::{Decision, ExternalizationMessage, ObjectKind, Payload, StreamEvent, TaskIntent};
use crate::state::{ExecutionState, FailureCategory, Outcome};
use crate::trial::Condition;

/// Template keys. `IDLE.*` renders the transition back to idle, `RESULT.*`
/// renders the final task result, `FAILED.FINAL` a failure with no retry
/// budget left.
pub const TEMPLATE_KEYS: [&str; 11] = [
    "NAVIGATING",
    "SEARCHING",
    "GRASPING",
    "DELIVERING",
    "RECOVERING",
    "FAILED",
    "FAILED.FINAL",
    "IDLE.SUCCESS",
    "IDLE.FAILURE",
    "RESULT.SUCCESS",
    "RESULT.FAILURE",
];

const DEFAULT_TEMPLATES: [(&str, &str); 11] = [
    ("NAVIGATING", "I'm heading out to find your {object}."),
    (
        "SEARCHING",
        "I've reached the pantry and I'm looking for your {object}.",
    ),
    ("GRASPING", "I've found your {object}. Picking up now."),
    ("DELIVERING", "I've got your {object} and I'm on my way back to you."),
    ("RECOVERING", "Trying again to get your {object}."),
    (
        "FAILED",
        "I ran into a problem getting your {object}: {failure}. Should I try again?",
    ),
    (
        "FAILED.FINAL",
        "I ran into a problem getting your {object}: {failure}. I can't try again.",
    ),
    ("IDLE.SUCCESS", "I'm back with your {object}."),
    ("IDLE.FAILURE", "I've stopped trying to get your {object}."),
    ("RESULT.SUCCESS", "I've brought your {object}. Enjoy!"),
    (
        "RESULT.FAILURE",
        "Sorry, I couldn't bring your {object} this time ({failure}).",
    ),
];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template file {path}: {message}")]
    Load { path: String, message: String },
    #[error("unknown template key `{0}`")]
    UnknownKey(String),
    #[error("template `{0}` does not mention {{object}}")]
    MissingObject(String),
}

/// Message templates keyed by state/outcome with `{object}` and `{failure}`
/// placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    entries: BTreeMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            entries: DEFAULT_TEMPLATES
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct TemplateFile {
    #[serde(default)]
    templates: BTreeMap<String, String>,
}

impl Templates {
    /// Defaults overridden by the given entries.
    pub fn with_overrides(overrides: impl IntoIterator<Item = (String, String)>) -> Result<Self, TemplateError> {
        let mut templates = Templates::default();
        for (key, value) in overrides {
            if !TEMPLATE_KEYS.contains(&key.as_str()) {
                return Err(TemplateError::UnknownKey(key));
            }
            if !value.contains("{object}") {
                return Err(TemplateError::MissingObject(key));
            }
            templates.entries.insert(key, value);
        }
        Ok(templates)
    }

    /// Loads a TOML file with a `[templates]` table.
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let load_err = |message: String| TemplateError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let file: TemplateFile = toml::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        Self::with_overrides(file.templates)
    }

    pub fn render(&self, key: &str, object: ObjectKind, failure: Option<FailureCategory>) -> String {
        let template = self.entries.get(key).map(String::as_str).unwrap_or("{object}");
        template
            .replace("{object}", object.noun())
            .replace("{failure}", failure.map_or("unknown problem", failure_phrase))
    }
}

fn failure_phrase(category: FailureCategory) -> &'static str {
    match category {
        FailureCategory::NavigationError => "I couldn't find a path",
        FailureCategory::GraspFailure => "I couldn't get a grip",
        FailureCategory::SystemHang => "my systems stopped responding",
        FailureCategory::MediatorError => "I lost my connection to the robot",
        FailureCategory::Other => "something unexpected happened",
    }
}

/// Progress shown for `state` given the last fraction shown. IDLE reads as
/// 0.0 before dispatch (nothing shown yet) and as 1.0 once the task has
/// made progress, which is the terminal transition.
pub fn progress_fraction(state: ExecutionState, last: f64) -> f64 {
    match state {
        ExecutionState::Idle if last <= 0.0 => 0.0,
        ExecutionState::Idle => 1.0,
        ExecutionState::Navigating => 0.25,
        ExecutionState::Searching => 0.45,
        ExecutionState::Grasping => 0.65,
        ExecutionState::Delivering => 0.85,
        ExecutionState::Failed | ExecutionState::Recovering => last,
    }
}

/// Per-task facts the mediator needs beyond the event itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskView {
    pub object: ObjectKind,
    pub last_progress: f64,
    /// Whether a failure entered now will be put to the user.
    pub retry_available: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mediator {
    pub templates: Templates,
}

impl Mediator {
    pub fn new(templates: Templates) -> Self {
        Mediator { templates }
    }

    /// Message for a state transition or task result, or `None` when the
    /// condition keeps it from the user.
    pub fn externalize(
        &self,
        event: &StreamEvent,
        condition: Condition,
        view: &TaskView,
    ) -> Option<ExternalizationMessage> {
        match &event.payload {
            Payload::StateTransition {
                from,
                to,
                failure_category,
            } => {
                if condition == Condition::Hidden {
                    return None;
                }
                let (key, requires_response) = match (from, to) {
                    (_, ExecutionState::Failed) if view.retry_available => ("FAILED", true),
                    (_, ExecutionState::Failed) => ("FAILED.FINAL", false),
                    (ExecutionState::Delivering, ExecutionState::Idle) => ("IDLE.SUCCESS", false),
                    (_, ExecutionState::Idle) => ("IDLE.FAILURE", false),
                    (_, state) => (state.as_str(), false),
                };
                Some(ExternalizationMessage {
                    text: self.templates.render(key, view.object, *failure_category),
                    progress: progress_fraction(*to, view.last_progress),
                    state: *to,
                    requires_response,
                })
            }
            Payload::TaskResult { outcome, .. } => {
                let key = match outcome {
                    Outcome::Success => "RESULT.SUCCESS",
                    Outcome::Failure(_) => "RESULT.FAILURE",
                };
                Some(ExternalizationMessage {
                    text: self.templates.render(key, view.object, outcome.failure_category()),
                    progress: 1.0,
                    state: ExecutionState::Idle,
                    requires_response: false,
                })
            }
            _ => None,
        }
    }
}

/// Behaviour of the scripted participant used in batch runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserAgentPolicy {
    /// Time from system readiness until the request has been spoken.
    pub request_latency: LogNormalSpec,
    /// Time to acknowledge the mediator's pre-dispatch prompt.
    pub pre_dispatch_latency: LogNormalSpec,
    /// Probability that the pre-dispatch prompt is accepted.
    #[serde(default = "one")]
    pub accept_probability: f64,
    /// Time to answer a failure confirmation request.
    pub confirm_latency: LogNormalSpec,
    #[serde(default = "one")]
    pub retry_probability: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for UserAgentPolicy {
    fn default() -> Self {
        UserAgentPolicy {
            request_latency: LogNormalSpec::new(32.5, 0.23),
            pre_dispatch_latency: LogNormalSpec::new(16.0, 0.28),
            accept_probability: 1.0,
            confirm_latency: LogNormalSpec::new(4.0, 0.3),
            retry_probability: 1.0,
        }
    }
}

impl UserAgentPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, spec) in [
            ("request_latency", self.request_latency),
            ("pre_dispatch_latency", self.pre_dispatch_latency),
            ("confirm_latency", self.confirm_latency),
        ] {
            spec.validate().map_err(|e| format!("{name}: {e}"))?;
        }
        for (name, p) in [
            ("accept_probability", self.accept_probability),
            ("retry_probability", self.retry_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Answers a failure confirmation request: RETRY with the policy's
/// probability, after a sampled latency.
pub fn scripted_user<R: Rng + ?Sized>(policy: &UserAgentPolicy, rng: &mut R) -> (Decision, u64) {
    let latency = policy.confirm_latency.sample_ms(rng);
    let decision = if rng.random::<f64>() < policy.retry_probability {
        Decision::Retry
    } else {
        Decision::Abort
    };
    (decision, latency)
}

/// Seeded scripted participant.
#[derive(Debug, Clone)]
pub struct ScriptedUser {
    pub policy: UserAgentPolicy,
    rng: ChaCha8Rng,
}

impl ScriptedUser {
    pub fn new(policy: UserAgentPolicy, seed: u64) -> Self {
        ScriptedUser {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn request_latency_ms(&mut self) -> u64 {
        self.policy.request_latency.sample_ms(&mut self.rng)
    }

    pub fn pre_dispatch_reply(&mut self) -> PreDispatchReply {
        let latency_ms = self.policy.pre_dispatch_latency.sample_ms(&mut self.rng);
        let accept = self.rng.random::<f64>() < self.policy.accept_probability;
        PreDispatchReply { accept, latency_ms }
    }

    pub fn answer_confirmation(&mut self) -> (Decision, u64) {
        scripted_user(&self.policy, &mut self.rng)
    }

    pub fn choose_object(&mut self) -> ObjectKind {
        ObjectKind::ALL[self.rng.random_range(0..ObjectKind::ALL.len())]
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Source of answers to the pre-dispatch prompt.
pub trait PreDispatchResponder {
    fn respond(&mut self, intent: &TaskIntent) -> PreDispatchReply;
}

impl PreDispatchResponder for ScriptedUser {
    fn respond(&mut self, _intent: &TaskIntent) -> PreDispatchReply {
        self.pre_dispatch_reply()
    }
}

impl PreDispatchResponder for PreDispatchReply {
    fn respond(&mut self, _intent: &TaskIntent) -> PreDispatchReply {
        *self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreDispatchOutcome {
    pub confirmed: bool,
    pub elapsed_ms: u64,
}

/// Task confirmation round trip before dispatch. Hidden execution skips it.
pub fn pre_dispatch_confirmation(
    intent: &TaskIntent,
    condition: Condition,
    responder: &mut dyn PreDispatchResponder,
) -> PreDispatchOutcome {
    match condition {
        Condition::Hidden => PreDispatchOutcome {
            confirmed: true,
            elapsed_ms: 0,
        },
        Condition::External => {
            let reply = responder.respond(intent);
            PreDispatchOutcome {
                confirmed: reply.accept,
                elapsed_ms: reply.latency_ms,
            }
        }
    }
}
