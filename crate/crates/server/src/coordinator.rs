//! Session and task bookkeeping behind the HTTP surface.
//!
//! All mutation goes through [`Coordinator`] while the caller holds one lock,
//! so every session log is appended by a single writer and is gapless in
//! `seq`. Timestamps are virtual milliseconds since session start and never
//! go backwards within a session.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use statebridge_core::mediator::{pre_dispatch_confirmation, Mediator, PreDispatchResponder, ScriptedUser, TaskView};
use statebridge_core::protocol::api::{
    AgentDirective, AgentDispatch, AgentStateUpdate, Confirm, CreateSession, SubmitTask, TaskSubmitted,
};
use statebridge_core::protocol::{Decision, Payload, StreamEvent, TaskIntent};
use statebridge_core::state::{ExecutionState, FailureCategory, Outcome, StateError, TaskMachine, TransitionEvent};
use statebridge_core::trial::{Condition, OutcomeLabel, StorageError, TransitionStamp, TrialLog, TrialRecord};
use thiserror::Error;
use tokio::sync::{watch, Notify};
use tracing::{debug, warn};

use crate::config::ServerConfig;
use crate::intent::parse_intent;

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("session `{0}` already has an active task")]
    SessionBusy(String),
    #[error("no execution agent is registered")]
    AgentUnavailable,
    #[error(transparent)]
    NoIntent(#[from] crate::intent::NoIntent),
    #[error("the user declined the task")]
    TaskDeclined,
    #[error("illegal transition {from} -> {to}: {source}")]
    IllegalTransition {
        from: ExecutionState,
        to: ExecutionState,
        #[source]
        source: StateError,
    },
    #[error("task `{0}` has no pending confirmation")]
    NoPendingConfirmation(String),
    #[error("task `{0}` is not active")]
    TaskNotActive(String),
    #[error("timestamp {ts_ms} precedes session clock {clock_ms}")]
    InvalidTimestamp { ts_ms: u64, clock_ms: u64 },
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl CoordError {
    pub fn code(&self) -> &'static str {
        match self {
            CoordError::UnknownSession(_) => "UNKNOWN_SESSION",
            CoordError::UnknownTask(_) => "UNKNOWN_TASK",
            CoordError::SessionBusy(_) => "SESSION_BUSY",
            CoordError::AgentUnavailable => "AGENT_UNAVAILABLE",
            CoordError::NoIntent(_) => "NO_INTENT",
            CoordError::TaskDeclined => "TASK_DECLINED",
            CoordError::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
            CoordError::NoPendingConfirmation(_) => "NO_PENDING_CONFIRMATION",
            CoordError::TaskNotActive(_) => "TASK_NOT_ACTIVE",
            CoordError::InvalidTimestamp { .. } => "INVALID_TIMESTAMP",
            CoordError::BadRequest(_) => "BAD_REQUEST",
            CoordError::Storage(_) => "STORAGE_ERROR",
        }
    }
}

#[derive(Debug)]
struct PendingConfirmation {
    issued_ts_ms: u64,
    issued_at: Instant,
}

#[derive(Debug)]
struct ActiveTask {
    task_id: String,
    intent: TaskIntent,
    machine: TaskMachine,
    dispatch_ts_ms: u64,
    grasp_attempts: u32,
    transitions: Vec<TransitionStamp>,
    progress: f64,
    pending: Option<PendingConfirmation>,
    retry_granted: bool,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub participant_id: String,
    pub condition: Condition,
    pub period: u8,
    clock_ms: u64,
    ready_ts_ms: u64,
    tasks_submitted: u32,
    log: Vec<StreamEvent>,
    active: Option<ActiveTask>,
    trials: Vec<TrialRecord>,
    log_len: watch::Sender<usize>,
}

impl Session {
    pub fn log(&self) -> &[StreamEvent] {
        &self.log
    }

    pub fn trials(&self) -> &[TrialRecord] {
        &self.trials
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn ready_ts_ms(&self) -> u64 {
        self.ready_ts_ms
    }

    pub fn active_task(&self) -> Option<&str> {
        self.active.as_ref().map(|t| t.task_id.as_str())
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.log_len.subscribe()
    }

    fn push(&mut self, task_id: &str, ts_ms: u64, payload: Payload) -> StreamEvent {
        debug_assert!(ts_ms >= self.clock_ms);
        self.clock_ms = ts_ms;
        let event = StreamEvent {
            seq: self.log.len() as u64 + 1,
            ts_ms,
            session_id: self.id.clone(),
            task_id: task_id.to_string(),
            payload,
        };
        self.log.push(event.clone());
        self.log_len.send_replace(self.log.len());
        event
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AgentStatus {
    pub registered: bool,
    pub faulted: bool,
}

pub struct Coordinator {
    config: ServerConfig,
    mediator: Mediator,
    sessions: BTreeMap<String, Session>,
    task_sessions: HashMap<String, String>,
    directives: HashMap<String, watch::Sender<Option<AgentDirective>>>,
    queue: VecDeque<AgentDispatch>,
    queue_notify: Arc<Notify>,
    agent: AgentStatus,
    trial_log: Option<TrialLog>,
    default_user: ScriptedUser,
    next_session: u64,
}

impl Coordinator {
    pub fn new(config: ServerConfig) -> Result<Self, CoordError> {
        let mediator = Mediator::new(
            config
                .load_templates()
                .map_err(|e| CoordError::BadRequest(e.to_string()))?,
        );
        let trial_log = config.trial_log.as_ref().map(TrialLog::open).transpose()?;
        let default_user = ScriptedUser::new(config.user, config.user_seed);
        Ok(Coordinator {
            config,
            mediator,
            sessions: BTreeMap::new(),
            task_sessions: HashMap::new(),
            directives: HashMap::new(),
            queue: VecDeque::new(),
            queue_notify: Arc::new(Notify::new()),
            agent: AgentStatus::default(),
            trial_log,
            default_user,
            next_session: 1,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn queue_notify(&self) -> Arc<Notify> {
        self.queue_notify.clone()
    }

    pub fn agent_status(&self) -> AgentStatus {
        self.agent
    }

    pub fn session(&self, session_id: &str) -> Result<&Session, CoordError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| CoordError::UnknownSession(session_id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    /// Completed trials of every session, in session order.
    pub fn trials(&self) -> Vec<TrialRecord> {
        self.sessions.values().flat_map(|s| s.trials.iter().cloned()).collect()
    }

    pub fn register_agent(&mut self) {
        self.agent = AgentStatus {
            registered: true,
            faulted: false,
        };
    }

    pub fn create_session(&mut self, req: CreateSession) -> Result<String, CoordError> {
        if !(1..=2).contains(&req.period) {
            return Err(CoordError::BadRequest(format!(
                "period must be 1 or 2, got {}",
                req.period
            )));
        }
        let id = format!("s{:04}", self.next_session);
        self.next_session += 1;
        let (log_len, _) = watch::channel(0);
        self.sessions.insert(
            id.clone(),
            Session {
                id: id.clone(),
                participant_id: req.participant_id,
                condition: req.condition,
                period: req.period,
                clock_ms: 0,
                ready_ts_ms: 0,
                tasks_submitted: 0,
                log: Vec::new(),
                active: None,
                trials: Vec::new(),
                log_len,
            },
        );
        Ok(id)
    }

    /// Parses the utterance, runs the pre-dispatch exchange for externalized
    /// sessions, and queues the task for the agent.
    pub fn submit_task(&mut self, session_id: &str, req: SubmitTask) -> Result<TaskSubmitted, CoordError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| CoordError::UnknownSession(session_id.to_string()))?;
        if session.active.is_some() {
            return Err(CoordError::SessionBusy(session_id.to_string()));
        }
        if !self.agent.registered {
            return Err(CoordError::AgentUnavailable);
        }
        let intent = parse_intent(&req.utterance)?;

        let mut clock = session.clock_ms + req.request_latency_ms.unwrap_or(0);
        let mut explicit = req.confirmation;
        let responder: &mut dyn PreDispatchResponder = match explicit.as_mut() {
            Some(reply) => reply,
            None => &mut self.default_user,
        };
        let exchange = pre_dispatch_confirmation(&intent, session.condition, responder);
        clock += exchange.elapsed_ms;
        session.clock_ms = clock;
        // a declined exchange still counts toward the next request's initiation
        if !exchange.confirmed {
            return Err(CoordError::TaskDeclined);
        }

        session.tasks_submitted += 1;
        let task_id = format!("{}-t{}", session.id, session.tasks_submitted);
        session.active = Some(ActiveTask {
            task_id: task_id.clone(),
            intent: intent.clone(),
            machine: TaskMachine::new(),
            dispatch_ts_ms: clock,
            grasp_attempts: 0,
            transitions: Vec::new(),
            progress: 0.0,
            pending: None,
            retry_granted: false,
        });
        self.task_sessions.insert(task_id.clone(), session.id.clone());
        self.directives.insert(task_id.clone(), watch::channel(None).0);
        self.queue.push_back(AgentDispatch {
            task_id: task_id.clone(),
            session_id: session.id.clone(),
            intent: intent.clone(),
            dispatch_ts_ms: clock,
            max_retries: self.config.max_retries,
        });
        self.queue_notify.notify_waiters();
        debug!(%task_id, object = %intent.object, dispatch_ts_ms = clock, "task dispatched");
        Ok(TaskSubmitted { task_id, intent })
    }

    /// Hands the oldest queued task to the agent, if any.
    pub fn next_dispatch(&mut self) -> Option<AgentDispatch> {
        self.register_agent();
        self.queue.pop_front()
    }

    pub fn directive_receiver(&self, task_id: &str) -> Result<watch::Receiver<Option<AgentDirective>>, CoordError> {
        self.directives
            .get(task_id)
            .map(watch::Sender::subscribe)
            .ok_or_else(|| CoordError::UnknownTask(task_id.to_string()))
    }

    fn session_of(&self, task_id: &str) -> Result<String, CoordError> {
        self.task_sessions
            .get(task_id)
            .cloned()
            .ok_or_else(|| CoordError::UnknownTask(task_id.to_string()))
    }

    fn set_directive(&self, task_id: &str, directive: Option<AgentDirective>) {
        send_directive(&self.directives, task_id, directive);
    }

    /// Applies a milestone reported by the agent.
    pub fn relay_state_update(&mut self, task_id: &str, update: AgentStateUpdate) -> Result<(), CoordError> {
        let sid = self.session_of(task_id)?;
        let session = self.sessions.get_mut(&sid).expect("indexed session exists");
        let clock = session.clock_ms;
        let task = match session.active.as_mut() {
            Some(t) if t.task_id == task_id => t,
            _ => return Err(CoordError::TaskNotActive(task_id.to_string())),
        };
        let ts = update.ts_ms.unwrap_or(clock);
        if ts < clock {
            return Err(CoordError::InvalidTimestamp {
                ts_ms: ts,
                clock_ms: clock,
            });
        }

        let event = task
            .machine
            .event_for_transition(update.from, update.to, update.failure_category)
            .and_then(|event| {
                // recovery must be granted by the user or the hidden policy
                if event == TransitionEvent::RetryApproved && !task.retry_granted || event == TransitionEvent::Abort {
                    Err(StateError::IllegalTransition {
                        state: task.machine.current,
                        event,
                    })
                } else {
                    Ok(event)
                }
            })
            .and_then(|event| task.machine.apply_event(event, self.config.max_retries));
        let next = match event {
            Ok(next) => next,
            Err(source) => {
                warn!(%task_id, from = %update.from, to = %update.to, "illegal transition from agent; faulting task");
                self.agent.faulted = true;
                self.fault_task(&sid, clock)?;
                return Err(CoordError::IllegalTransition {
                    from: update.from,
                    to: update.to,
                    source,
                });
            }
        };

        task.machine = next;
        if let Some(n) = update.grasp_attempts {
            task.grasp_attempts = task.grasp_attempts.max(n);
        }
        if update.to == ExecutionState::Recovering {
            task.retry_granted = false;
        }
        self.append_transition(&sid, update.from, update.to, update.failure_category, ts);

        let session = self.sessions.get_mut(&sid).expect("exists");
        let condition = session.condition;
        let task = session.active.as_mut().expect("still active");
        match update.to {
            ExecutionState::Failed => {
                send_directive(&self.directives, task_id, None);
                if task.machine.retries_left(self.config.max_retries) == 0 {
                    self.abort(&sid, ts)?;
                } else if condition == Condition::Hidden {
                    task.retry_granted = true;
                    let directive = AgentDirective {
                        decision: Decision::Retry,
                        ts_ms: ts,
                    };
                    send_directive(&self.directives, task_id, Some(directive));
                } else {
                    let category = update.failure_category.expect("validated by the state machine");
                    let payload = Payload::ConfirmationRequest {
                        failure_category: category,
                        resume_from: task.machine.resume_from.expect("set on failure"),
                        retries_used: task.machine.retries_used,
                        max_retries: self.config.max_retries,
                    };
                    task.pending = Some(PendingConfirmation {
                        issued_ts_ms: ts,
                        issued_at: Instant::now(),
                    });
                    session.push(task_id, ts, payload);
                }
            }
            ExecutionState::Idle => self.finish(&sid, ts)?,
            _ => {}
        }
        Ok(())
    }

    /// Records a user's retry/abort answer to an outstanding confirmation.
    pub fn handle_confirmation(&mut self, task_id: &str, req: Confirm) -> Result<(), CoordError> {
        let sid = self.session_of(task_id)?;
        let time_scale = self.config.time_scale;
        let session = self.sessions.get_mut(&sid).expect("indexed session exists");
        let task = session
            .active
            .as_mut()
            .filter(|t| t.task_id == task_id)
            .ok_or_else(|| CoordError::NoPendingConfirmation(task_id.to_string()))?;
        let pending = task
            .pending
            .take()
            .ok_or_else(|| CoordError::NoPendingConfirmation(task_id.to_string()))?;
        let latency_ms = req
            .latency_ms
            .unwrap_or_else(|| (pending.issued_at.elapsed().as_secs_f64() * 1000.0 * time_scale).round() as u64);
        let ts = (pending.issued_ts_ms + latency_ms).max(session.clock_ms);
        session.push(
            task_id,
            ts,
            Payload::ConfirmationResponse {
                decision: req.decision,
                latency_ms,
            },
        );
        let task = session.active.as_mut().expect("active");
        let directive = AgentDirective {
            decision: req.decision,
            ts_ms: ts,
        };
        send_directive(&self.directives, task_id, Some(directive));
        match req.decision {
            Decision::Retry => {
                task.retry_granted = true;
                Ok(())
            }
            Decision::Abort => self.abort(&sid, ts),
        }
    }

    /// Aborts confirmations left unanswered for longer than `timeout`.
    pub fn expire_confirmations(&mut self, timeout: Duration) -> Result<usize, CoordError> {
        let expired: Vec<String> = self
            .sessions
            .values()
            .filter_map(|s| s.active.as_ref())
            .filter(|t| t.pending.as_ref().is_some_and(|p| p.issued_at.elapsed() >= timeout))
            .map(|t| t.task_id.clone())
            .collect();
        for task_id in &expired {
            warn!(%task_id, "confirmation timed out; aborting");
            self.handle_confirmation(
                task_id,
                Confirm {
                    decision: Decision::Abort,
                    latency_ms: None,
                },
            )?;
        }
        Ok(expired.len())
    }

    fn append_transition(
        &mut self,
        sid: &str,
        from: ExecutionState,
        to: ExecutionState,
        failure_category: Option<FailureCategory>,
        ts: u64,
    ) {
        let session = self.sessions.get_mut(sid).expect("exists");
        let condition = session.condition;
        let task = session.active.as_mut().expect("active");
        let tid = task.task_id.clone();
        task.transitions.push(TransitionStamp { to, ts_ms: ts });
        let view = TaskView {
            object: task.intent.object,
            last_progress: task.progress,
            retry_available: task.machine.retries_left(self.config.max_retries) > 0,
        };
        let event = session.push(
            &tid,
            ts,
            Payload::StateTransition {
                from,
                to,
                failure_category,
            },
        );
        if let Some(message) = self.mediator.externalize(&event, condition, &view) {
            let progress = message.progress;
            session.push(&tid, ts, Payload::Externalization(message));
            session.active.as_mut().expect("active").progress = progress;
        }
    }

    fn abort(&mut self, sid: &str, ts: u64) -> Result<(), CoordError> {
        let max_retries = self.config.max_retries;
        let session = self.sessions.get_mut(sid).expect("exists");
        let task = session.active.as_mut().expect("active");
        task.pending = None;
        let tid = task.task_id.clone();
        task.machine = task
            .machine
            .apply_event(TransitionEvent::Abort, max_retries)
            .expect("abort is legal from FAILED");
        self.set_directive(
            &tid,
            Some(AgentDirective {
                decision: Decision::Abort,
                ts_ms: ts,
            }),
        );
        self.append_transition(sid, ExecutionState::Failed, ExecutionState::Idle, None, ts);
        self.finish(sid, ts)
    }

    /// Terminates the active task after the agent misbehaved.
    fn fault_task(&mut self, sid: &str, ts: u64) -> Result<(), CoordError> {
        let max_retries = self.config.max_retries;
        let session = self.sessions.get_mut(sid).expect("exists");
        let task = session.active.as_mut().expect("active");
        let current = task.machine.current;
        if current.is_active_phase() || current == ExecutionState::Recovering {
            let category = FailureCategory::SystemHang;
            task.machine = task
                .machine
                .apply_event(TransitionEvent::Failure(category), max_retries)
                .expect("failure is legal from active phases");
            self.append_transition(sid, current, ExecutionState::Failed, Some(category), ts);
            self.abort(sid, ts)
        } else if current == ExecutionState::Failed {
            task.machine.last_failure = Some(FailureCategory::SystemHang);
            self.abort(sid, ts)
        } else {
            // never started: no milestone to unwind
            let task = self
                .sessions
                .get_mut(sid)
                .expect("exists")
                .active
                .as_mut()
                .expect("active");
            task.machine.terminal_outcome = Some(Outcome::Failure(FailureCategory::SystemHang));
            let tid = task.task_id.clone();
            self.set_directive(
                &tid,
                Some(AgentDirective {
                    decision: Decision::Abort,
                    ts_ms: ts,
                }),
            );
            self.finish(sid, ts)
        }
    }

    fn finish(&mut self, sid: &str, ts: u64) -> Result<(), CoordError> {
        let session = self.sessions.get_mut(sid).expect("exists");
        let task = session.active.take().expect("active");
        let outcome = task
            .machine
            .terminal_outcome
            .expect("finish is only reached from a terminal machine");
        let result = session.push(
            &task.task_id,
            ts,
            Payload::TaskResult {
                outcome,
                grasp_attempts: task.grasp_attempts,
            },
        );
        let view = TaskView {
            object: task.intent.object,
            last_progress: task.progress,
            retry_available: false,
        };
        if let Some(message) = self.mediator.externalize(&result, session.condition, &view) {
            session.push(&task.task_id, ts, Payload::Externalization(message));
        }
        let record = TrialRecord {
            trial_id: task.task_id.clone(),
            participant_id: session.participant_id.clone(),
            condition: session.condition,
            period: session.period,
            object: task.intent.object,
            outcome: if outcome.is_success() {
                OutcomeLabel::Success
            } else {
                OutcomeLabel::Failure
            },
            failure_category: outcome.failure_category(),
            ready_ts_ms: session.ready_ts_ms,
            dispatch_ts_ms: task.dispatch_ts_ms,
            terminal_ts_ms: ts,
            grasp_attempts: task.grasp_attempts,
            transitions: task.transitions,
        };
        session.ready_ts_ms = ts;
        session.trials.push(record.clone());
        debug!(task_id = %record.trial_id, outcome = ?outcome, "task finished");
        self.persist_trial(&record)?;
        Ok(())
    }

    /// Appends the record to the trial log; a repeated id is a no-op.
    pub fn persist_trial(&mut self, record: &TrialRecord) -> Result<bool, CoordError> {
        match self.trial_log.as_mut() {
            Some(log) => Ok(log.append(record)?),
            None => Ok(false),
        }
    }
}

fn send_directive(
    directives: &HashMap<String, watch::Sender<Option<AgentDirective>>>,
    task_id: &str,
    directive: Option<AgentDirective>,
) {
    if let Some(tx) = directives.get(task_id) {
        tx.send_replace(directive);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statebridge_core::protocol::api::PreDispatchReply;
    use statebridge_core::protocol::{EventKind, ObjectKind};
    use ExecutionState::*;

    fn coordinator() -> Coordinator {
        let mut c = Coordinator::new(ServerConfig::default()).unwrap();
        c.register_agent();
        c
    }

    fn session(c: &mut Coordinator, condition: Condition) -> String {
        c.create_session(CreateSession {
            participant_id: "P01".into(),
            condition,
            period: 1,
        })
        .unwrap()
    }

    fn submit(c: &mut Coordinator, sid: &str, utterance: &str) -> String {
        c.submit_task(
            sid,
            SubmitTask {
                utterance: utterance.into(),
                request_latency_ms: Some(30_000),
                confirmation: Some(PreDispatchReply {
                    accept: true,
                    latency_ms: 16_000,
                }),
            },
        )
        .unwrap()
        .task_id
    }

    fn report(
        c: &mut Coordinator,
        tid: &str,
        from: ExecutionState,
        to: ExecutionState,
        ts: u64,
    ) -> Result<(), CoordError> {
        let failure_category = (to == Failed).then_some(FailureCategory::GraspFailure);
        c.relay_state_update(
            tid,
            AgentStateUpdate {
                from,
                to,
                failure_category,
                ts_ms: Some(ts),
                grasp_attempts: Some(1),
            },
        )
    }

    fn kinds(c: &Coordinator, sid: &str) -> Vec<EventKind> {
        c.session(sid).unwrap().log().iter().map(|e| e.kind()).collect()
    }

    #[test]
    fn happy_path_dispatches_and_succeeds() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::Hidden);
        let tid = submit(&mut c, &sid, "bring me fruit");
        let dispatch = c.next_dispatch().unwrap();
        assert_eq!(dispatch.intent.object, ObjectKind::Fruit);
        assert_eq!(dispatch.task_id, tid);
        // hidden: no confirmation exchange before dispatch
        assert_eq!(dispatch.dispatch_ts_ms, 30_000);

        let mut ts = 30_000;
        for (from, to) in [
            (Idle, Navigating),
            (Navigating, Searching),
            (Searching, Grasping),
            (Grasping, Delivering),
            (Delivering, Idle),
        ] {
            ts += 1000;
            report(&mut c, &tid, from, to, ts).unwrap();
        }
        let s = c.session(&sid).unwrap();
        let log = s.log();
        assert_eq!(log.iter().filter(|e| e.kind() == EventKind::Externalization).count(), 1);
        assert!(matches!(
            log[log.len() - 2].payload,
            Payload::TaskResult {
                outcome: Outcome::Success,
                ..
            }
        ));
        let trial = &s.trials()[0];
        assert_eq!(
            (trial.ready_ts_ms, trial.dispatch_ts_ms, trial.terminal_ts_ms),
            (0, 30_000, 35_000)
        );
        assert!(log
            .windows(2)
            .all(|w| w[1].seq == w[0].seq + 1 && w[1].ts_ms >= w[0].ts_ms));
    }

    #[test]
    fn external_dispatch_includes_confirmation_round_trip() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        submit(&mut c, &sid, "water please");
        assert_eq!(c.next_dispatch().unwrap().dispatch_ts_ms, 46_000);
    }

    #[test]
    fn declined_task_is_not_dispatched() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let err = c
            .submit_task(
                &sid,
                SubmitTask {
                    utterance: "chips".into(),
                    request_latency_ms: None,
                    confirmation: Some(PreDispatchReply {
                        accept: false,
                        latency_ms: 5,
                    }),
                },
            )
            .unwrap_err();
        assert!(matches!(err, CoordError::TaskDeclined));
        assert!(c.next_dispatch().is_none());
    }

    #[test]
    fn busy_unknown_and_unavailable() {
        let mut c = Coordinator::new(ServerConfig::default()).unwrap();
        let sid = session(&mut c, Condition::Hidden);
        let req = SubmitTask {
            utterance: "water".into(),
            request_latency_ms: None,
            confirmation: None,
        };
        assert!(matches!(
            c.submit_task(&sid, req.clone()),
            Err(CoordError::AgentUnavailable)
        ));
        c.register_agent();
        assert!(matches!(
            c.submit_task(
                &sid,
                SubmitTask {
                    utterance: "hello robot".into(),
                    ..req.clone()
                }
            ),
            Err(CoordError::NoIntent(_))
        ));
        c.submit_task(&sid, req.clone()).unwrap();
        assert!(matches!(
            c.submit_task(&sid, req.clone()),
            Err(CoordError::SessionBusy(_))
        ));
        assert!(matches!(c.submit_task("nope", req), Err(CoordError::UnknownSession(_))));
        assert!(c
            .create_session(CreateSession {
                participant_id: "x".into(),
                condition: Condition::Hidden,
                period: 3
            })
            .is_err());
    }

    #[test]
    fn illegal_report_faults_task_as_system_hang() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let tid = submit(&mut c, &sid, "water");
        report(&mut c, &tid, Idle, Navigating, 50_000).unwrap();
        let err = report(&mut c, &tid, Navigating, Grasping, 51_000).unwrap_err();
        assert!(matches!(err, CoordError::IllegalTransition { .. }));
        assert!(c.agent_status().faulted);
        let trial = &c.session(&sid).unwrap().trials()[0];
        assert_eq!(trial.failure_category, Some(FailureCategory::SystemHang));
        // no longer active
        assert!(matches!(
            report(&mut c, &tid, Navigating, Searching, 52_000),
            Err(CoordError::TaskNotActive(_))
        ));
    }

    #[test]
    fn illegal_report_before_start() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::Hidden);
        let tid = submit(&mut c, &sid, "water");
        assert!(report(&mut c, &tid, Idle, Grasping, 40_000).is_err());
        let s = c.session(&sid).unwrap();
        assert_eq!(s.trials()[0].failure_category, Some(FailureCategory::SystemHang));
        assert!(s.active_task().is_none());
    }

    #[test]
    fn external_failure_requests_confirmation_then_retry() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let tid = submit(&mut c, &sid, "water");
        report(&mut c, &tid, Idle, Navigating, 50_000).unwrap();
        report(&mut c, &tid, Navigating, Searching, 60_000).unwrap();
        report(&mut c, &tid, Searching, Grasping, 70_000).unwrap();
        report(&mut c, &tid, Grasping, Failed, 80_000).unwrap();
        assert_eq!(*kinds(&c, &sid).last().unwrap(), EventKind::ConfirmationRequest);
        // the agent cannot start recovering on its own
        let mut rx = c.directive_receiver(&tid).unwrap();
        assert_eq!(*rx.borrow_and_update(), None);

        c.handle_confirmation(
            &tid,
            Confirm {
                decision: Decision::Retry,
                latency_ms: Some(4_000),
            },
        )
        .unwrap();
        assert_eq!(
            *rx.borrow_and_update(),
            Some(AgentDirective {
                decision: Decision::Retry,
                ts_ms: 84_000
            })
        );
        report(&mut c, &tid, Failed, Recovering, 84_000).unwrap();
        let log = c.session(&sid).unwrap().log();
        let last_transition = log
            .iter()
            .rev()
            .find_map(|e| match e.payload {
                Payload::StateTransition { from, to, .. } => Some((from, to)),
                _ => None,
            })
            .unwrap();
        assert_eq!(last_transition, (Failed, Recovering));
        assert!(matches!(
            c.handle_confirmation(
                &tid,
                Confirm {
                    decision: Decision::Retry,
                    latency_ms: None
                }
            ),
            Err(CoordError::NoPendingConfirmation(_))
        ));
    }

    #[test]
    fn unapproved_recovery_is_illegal() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let tid = submit(&mut c, &sid, "water");
        report(&mut c, &tid, Idle, Navigating, 50_000).unwrap();
        report(&mut c, &tid, Navigating, Failed, 60_000).unwrap();
        assert!(report(&mut c, &tid, Failed, Recovering, 60_000).is_err());
    }

    #[test]
    fn abort_terminates_with_failure() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let tid = submit(&mut c, &sid, "water");
        report(&mut c, &tid, Idle, Navigating, 50_000).unwrap();
        report(&mut c, &tid, Navigating, Failed, 60_000).unwrap();
        c.handle_confirmation(
            &tid,
            Confirm {
                decision: Decision::Abort,
                latency_ms: Some(1_000),
            },
        )
        .unwrap();
        let s = c.session(&sid).unwrap();
        let result = s.log().iter().find(|e| e.is_terminal()).unwrap();
        assert_eq!(result.ts_ms, 61_000);
        assert!(matches!(
            result.payload,
            Payload::TaskResult {
                outcome: Outcome::Failure(FailureCategory::GraspFailure),
                ..
            }
        ));
        assert_eq!(s.trials()[0].outcome, OutcomeLabel::Failure);
    }

    #[test]
    fn running_task_has_no_pending_confirmation() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let tid = submit(&mut c, &sid, "water");
        report(&mut c, &tid, Idle, Navigating, 50_000).unwrap();
        assert!(matches!(
            c.handle_confirmation(
                &tid,
                Confirm {
                    decision: Decision::Retry,
                    latency_ms: None
                }
            ),
            Err(CoordError::NoPendingConfirmation(_))
        ));
        assert!(matches!(
            c.handle_confirmation(
                "ghost",
                Confirm {
                    decision: Decision::Retry,
                    latency_ms: None
                }
            ),
            Err(CoordError::UnknownTask(_))
        ));
    }

    #[test]
    fn hidden_failures_auto_retry_then_auto_abort() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::Hidden);
        let tid = submit(&mut c, &sid, "chips");
        let mut rx = c.directive_receiver(&tid).unwrap();
        report(&mut c, &tid, Idle, Navigating, 40_000).unwrap();
        let mut ts = 40_000;
        for _ in 0..2 {
            ts += 1_000;
            report(&mut c, &tid, Navigating, Failed, ts).unwrap();
            assert_eq!(rx.borrow_and_update().unwrap().decision, Decision::Retry);
            report(&mut c, &tid, Failed, Recovering, ts).unwrap();
            report(&mut c, &tid, Recovering, Navigating, ts + 500).unwrap();
            ts += 500;
        }
        report(&mut c, &tid, Navigating, Failed, ts + 1).unwrap();
        assert_eq!(rx.borrow_and_update().unwrap().decision, Decision::Abort);
        let s = c.session(&sid).unwrap();
        assert!(s.log().iter().all(|e| !matches!(
            e.kind(),
            EventKind::ConfirmationRequest | EventKind::ConfirmationResponse
        )));
        assert_eq!(
            s.log()
                .iter()
                .filter(|e| e.kind() == EventKind::Externalization)
                .count(),
            1
        );
        assert_eq!(s.trials()[0].outcome, OutcomeLabel::Failure);
    }

    #[test]
    fn timestamps_cannot_go_backwards() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::Hidden);
        let tid = submit(&mut c, &sid, "chips");
        assert!(matches!(
            report(&mut c, &tid, Idle, Navigating, 10),
            Err(CoordError::InvalidTimestamp { .. })
        ));
    }

    #[test]
    fn confirmation_timeout_aborts() {
        let mut c = coordinator();
        let sid = session(&mut c, Condition::External);
        let tid = submit(&mut c, &sid, "water");
        report(&mut c, &tid, Idle, Navigating, 50_000).unwrap();
        report(&mut c, &tid, Navigating, Failed, 60_000).unwrap();
        assert_eq!(c.expire_confirmations(Duration::from_secs(3600)).unwrap(), 0);
        assert_eq!(c.expire_confirmations(Duration::ZERO).unwrap(), 1);
        assert!(c.session(&sid).unwrap().active_task().is_none());
    }

    #[test]
    fn trial_log_is_written_once() {
        let path = std::env::temp_dir().join(format!("statebridge-coord-{}.jsonl", std::process::id()));
        let _ = std::fs::remove_file(&path);
        let mut c = Coordinator::new(ServerConfig {
            trial_log: Some(path.clone()),
            ..ServerConfig::default()
        })
        .unwrap();
        c.register_agent();
        let sid = session(&mut c, Condition::Hidden);
        let tid = submit(&mut c, &sid, "water");
        let mut ts = 30_000;
        for (from, to) in [
            (Idle, Navigating),
            (Navigating, Searching),
            (Searching, Grasping),
            (Grasping, Delivering),
            (Delivering, Idle),
        ] {
            ts += 1000;
            report(&mut c, &tid, from, to, ts).unwrap();
        }
        let record = c.session(&sid).unwrap().trials()[0].clone();
        assert!(!c.persist_trial(&record).unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"outcome\":\"SUCCESS\""));
        std::fs::remove_file(path).unwrap();
    }
}
