//! Task-level execution states and the milestone-driven state machine.
//!
//! The machine is a plain value: [`TaskMachine::apply_event`] never mutates
//! its receiver, so replaying a recorded event sequence always yields the
//! same state sequence. Server, simulator and mediator all share it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on user/server approved recovery attempts per task.
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionState {
    Idle,
    Navigating,
    Searching,
    Grasping,
    Failed,
    Recovering,
    Delivering,
}

impl ExecutionState {
    pub const ALL: [ExecutionState; 7] = [
        ExecutionState::Idle,
        ExecutionState::Navigating,
        ExecutionState::Searching,
        ExecutionState::Grasping,
        ExecutionState::Failed,
        ExecutionState::Recovering,
        ExecutionState::Delivering,
    ];

    /// Phases in which the robot is doing work that can fail and be resumed.
    pub const ACTIVE_PHASES: [ExecutionState; 4] = [
        ExecutionState::Navigating,
        ExecutionState::Searching,
        ExecutionState::Grasping,
        ExecutionState::Delivering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionState::Idle => "IDLE",
            ExecutionState::Navigating => "NAVIGATING",
            ExecutionState::Searching => "SEARCHING",
            ExecutionState::Grasping => "GRASPING",
            ExecutionState::Failed => "FAILED",
            ExecutionState::Recovering => "RECOVERING",
            ExecutionState::Delivering => "DELIVERING",
        }
    }

    pub fn is_active_phase(self) -> bool {
        Self::ACTIVE_PHASES.contains(&self)
    }

    /// Successor set of the fixed transition graph.
    pub fn legal_successors(self) -> &'static [ExecutionState] {
        use ExecutionState::*;
        match self {
            Idle => &[Navigating],
            Navigating => &[Searching, Failed],
            Searching => &[Grasping, Failed],
            Grasping => &[Delivering, Failed],
            Delivering => &[Idle, Failed],
            Failed => &[Recovering, Idle],
            Recovering => &[Navigating, Searching, Grasping, Delivering, Failed],
        }
    }

    pub fn can_transition_to(self, next: ExecutionState) -> bool {
        self.legal_successors().contains(&next)
    }
}

impl fmt::Display for ExecutionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecutionState {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|state| state.as_str() == s)
            .ok_or_else(|| UnknownName(s.to_string()))
    }
}

/// Free function form of [`ExecutionState::legal_successors`].
pub fn legal_successors(state: ExecutionState) -> &'static [ExecutionState] {
    state.legal_successors()
}

/// Failure taxonomy used for both injected and observed failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureCategory {
    NavigationError,
    GraspFailure,
    SystemHang,
    MediatorError,
    Other,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 5] = [
        FailureCategory::NavigationError,
        FailureCategory::GraspFailure,
        FailureCategory::SystemHang,
        FailureCategory::MediatorError,
        FailureCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::NavigationError => "NAVIGATION_ERROR",
            FailureCategory::GraspFailure => "GRASP_FAILURE",
            FailureCategory::SystemHang => "SYSTEM_HANG",
            FailureCategory::MediatorError => "MEDIATOR_ERROR",
            FailureCategory::Other => "OTHER",
        }
    }
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureCategory {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownName(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown name `{0}`")]
pub struct UnknownName(pub String);

/// Milestone events. A failure always carries its category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransitionEvent {
    Dispatch,
    ArrivedAtTarget,
    ObjectFound,
    GraspSuccess,
    ArrivedAtUser,
    Failure(FailureCategory),
    RetryApproved,
    Abort,
    RecoveryDone,
}

impl TransitionEvent {
    pub fn kind_str(self) -> &'static str {
        match self {
            TransitionEvent::Dispatch => "DISPATCH",
            TransitionEvent::ArrivedAtTarget => "ARRIVED_AT_TARGET",
            TransitionEvent::ObjectFound => "OBJECT_FOUND",
            TransitionEvent::GraspSuccess => "GRASP_SUCCESS",
            TransitionEvent::ArrivedAtUser => "ARRIVED_AT_USER",
            TransitionEvent::Failure(_) => "FAILURE",
            TransitionEvent::RetryApproved => "RETRY_APPROVED",
            TransitionEvent::Abort => "ABORT",
            TransitionEvent::RecoveryDone => "RECOVERY_DONE",
        }
    }

    pub fn failure_category(self) -> Option<FailureCategory> {
        match self {
            TransitionEvent::Failure(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for TransitionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionEvent::Failure(c) => write!(f, "FAILURE({c})"),
            other => f.write_str(other.kind_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure(FailureCategory),
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::Success)
    }

    pub fn failure_category(self) -> Option<FailureCategory> {
        match self {
            Outcome::Success => None,
            Outcome::Failure(c) => Some(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("event {event} is not legal in state {state}")]
    IllegalTransition {
        state: ExecutionState,
        event: TransitionEvent,
    },
    #[error("retry budget of {max_retries} exhausted")]
    RetriesExhausted { max_retries: u32 },
    #[error("no milestone event moves {from} to {to}")]
    NoSuchEdge { from: ExecutionState, to: ExecutionState },
}

/// Per-task state machine value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskMachine {
    pub current: ExecutionState,
    /// Active phase at the moment of the most recent failure.
    pub resume_from: Option<ExecutionState>,
    pub retries_used: u32,
    pub terminal_outcome: Option<Outcome>,
    pub last_failure: Option<FailureCategory>,
}

impl Default for TaskMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskMachine {
    pub fn new() -> Self {
        TaskMachine {
            current: ExecutionState::Idle,
            resume_from: None,
            retries_used: 0,
            terminal_outcome: None,
            last_failure: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal_outcome.is_some()
    }

    pub fn retries_left(&self, max_retries: u32) -> u32 {
        max_retries.saturating_sub(self.retries_used)
    }

    /// Applies one milestone event, returning the successor machine.
    pub fn apply_event(&self, event: TransitionEvent, max_retries: u32) -> Result<TaskMachine, StateError> {
        use ExecutionState::*;
        use TransitionEvent::*;

        let illegal = || StateError::IllegalTransition {
            state: self.current,
            event,
        };
        if self.is_terminal() {
            return Err(illegal());
        }

        let mut next = *self;
        match (self.current, event) {
            (Idle, Dispatch) => next.current = Navigating,
            (Navigating, ArrivedAtTarget) => next.current = Searching,
            (Searching, ObjectFound) => next.current = Grasping,
            (Grasping, GraspSuccess) => next.current = Delivering,
            (Delivering, ArrivedAtUser) => {
                next.current = Idle;
                next.terminal_outcome = Some(Outcome::Success);
            }
            (phase, Failure(category)) if phase.is_active_phase() => {
                next.current = Failed;
                next.resume_from = Some(phase);
                next.last_failure = Some(category);
            }
            // a failed recovery keeps the phase it was trying to resume
            (Recovering, Failure(category)) => {
                next.current = Failed;
                next.last_failure = Some(category);
            }
            (Failed, RetryApproved) => {
                if self.retries_used >= max_retries {
                    return Err(StateError::RetriesExhausted { max_retries });
                }
                next.current = Recovering;
                next.retries_used += 1;
            }
            (Failed, Abort) => {
                next.current = Idle;
                let category = self.last_failure.unwrap_or(FailureCategory::Other);
                next.terminal_outcome = Some(Outcome::Failure(category));
            }
            (Recovering, RecoveryDone) => {
                next.current = self.resume_from.ok_or_else(illegal)?;
            }
            _ => return Err(illegal()),
        }
        debug_assert!(self.current.can_transition_to(next.current));
        Ok(next)
    }

    /// Applies the retry if budget remains, otherwise aborts.
    pub fn retry_or_abort(&self, max_retries: u32) -> Result<TaskMachine, StateError> {
        match self.apply_event(TransitionEvent::RetryApproved, max_retries) {
            Err(StateError::RetriesExhausted { .. }) => self.apply_event(TransitionEvent::Abort, max_retries),
            other => other,
        }
    }

    /// Maps an observed `(from, to)` state change onto the milestone event
    /// that produces it from this machine.
    pub fn event_for_transition(
        &self,
        from: ExecutionState,
        to: ExecutionState,
        failure_category: Option<FailureCategory>,
    ) -> Result<TransitionEvent, StateError> {
        use ExecutionState::*;
        let no_edge = StateError::NoSuchEdge { from, to };
        if from != self.current || !from.can_transition_to(to) {
            return Err(no_edge);
        }
        let event = match (from, to) {
            (_, Failed) => TransitionEvent::Failure(failure_category.ok_or(no_edge)?),
            (Idle, Navigating) => TransitionEvent::Dispatch,
            (Navigating, Searching) => TransitionEvent::ArrivedAtTarget,
            (Searching, Grasping) => TransitionEvent::ObjectFound,
            (Grasping, Delivering) => TransitionEvent::GraspSuccess,
            (Delivering, Idle) => TransitionEvent::ArrivedAtUser,
            (Failed, Recovering) => TransitionEvent::RetryApproved,
            (Failed, Idle) => TransitionEvent::Abort,
            (Recovering, target) if Some(target) == self.resume_from => TransitionEvent::RecoveryDone,
            _ => return Err(no_edge),
        };
        if to != Failed && failure_category.is_some() {
            return Err(no_edge);
        }
        Ok(event)
    }
}

pub fn new_machine() -> TaskMachine {
    TaskMachine::new()
}

/// Replays an event sequence from a fresh machine, returning every
/// intermediate machine (the initial one included).
pub fn replay(events: &[TransitionEvent], max_retries: u32) -> Result<Vec<TaskMachine>, StateError> {
    let mut machines = vec![TaskMachine::new()];
    for event in events {
        let next = machines[machines.len() - 1].apply_event(*event, max_retries)?;
        machines.push(next);
    }
    Ok(machines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ExecutionState::*;
    use TransitionEvent::*;

    #[test]
    fn fresh_machine_is_idle() {
        let m = new_machine();
        assert_eq!(m.current, Idle);
        assert_eq!(m.terminal_outcome, None);
        assert_eq!(m.retries_used, 0);
        assert_eq!(m.resume_from, None);
    }

    #[test]
    fn successor_sets() {
        assert_eq!(legal_successors(Idle), &[Navigating]);
        assert_eq!(legal_successors(Grasping), &[Delivering, Failed]);
        assert_eq!(legal_successors(Failed), &[Recovering, Idle]);
    }

    #[test]
    fn string_forms_are_upper_case_names() {
        for s in ExecutionState::ALL {
            assert_eq!(s.to_string().parse::<ExecutionState>().unwrap(), s);
            assert_eq!(s.to_string(), s.to_string().to_uppercase());
        }
        assert_eq!(
            serde_json::to_string(&FailureCategory::SystemHang).unwrap(),
            "\"SYSTEM_HANG\""
        );
        assert!("Idle".parse::<ExecutionState>().is_err());
    }

    #[test]
    fn dispatch_starts_navigation() {
        let m = new_machine().apply_event(Dispatch, 3).unwrap();
        assert_eq!(m.current, Navigating);
    }

    #[test]
    fn grasp_failure_records_resume_point() {
        let m = replay(&[Dispatch, ArrivedAtTarget, ObjectFound], 3).unwrap()[3];
        assert_eq!(m.current, Grasping);
        let failed = m.apply_event(Failure(FailureCategory::GraspFailure), 3).unwrap();
        assert_eq!(failed.current, Failed);
        assert_eq!(failed.resume_from, Some(Grasping));
    }

    #[test]
    fn grasp_success_while_idle_is_illegal() {
        assert!(matches!(
            new_machine().apply_event(GraspSuccess, 3),
            Err(StateError::IllegalTransition { state: Idle, .. })
        ));
    }

    #[test]
    fn retry_then_recovery_resumes_failed_phase() {
        let ms = replay(
            &[
                Dispatch,
                ArrivedAtTarget,
                ObjectFound,
                Failure(FailureCategory::GraspFailure),
                RetryApproved,
                RecoveryDone,
            ],
            3,
        )
        .unwrap();
        let last = ms.last().unwrap();
        assert_eq!(last.current, Grasping);
        assert_eq!(last.retries_used, 1);
    }

    #[test]
    fn recovery_failure_keeps_resume_point() {
        let ms = replay(
            &[
                Dispatch,
                ArrivedAtTarget,
                Failure(FailureCategory::SystemHang),
                RetryApproved,
                Failure(FailureCategory::Other),
            ],
            2,
        )
        .unwrap();
        let last = ms.last().unwrap();
        assert_eq!(last.current, Failed);
        assert_eq!(last.resume_from, Some(Searching));
        assert_eq!(last.last_failure, Some(FailureCategory::Other));
    }

    #[test]
    fn exhausted_retries_error_and_abort_translation() {
        let failed = replay(&[Dispatch, Failure(FailureCategory::NavigationError)], 0).unwrap()[2];
        assert_eq!(
            failed.apply_event(RetryApproved, 0),
            Err(StateError::RetriesExhausted { max_retries: 0 })
        );
        let aborted = failed.retry_or_abort(0).unwrap();
        assert_eq!(aborted.current, Idle);
        assert_eq!(
            aborted.terminal_outcome,
            Some(Outcome::Failure(FailureCategory::NavigationError))
        );
    }

    #[test]
    fn terminal_machine_rejects_everything() {
        let done = replay(
            &[Dispatch, ArrivedAtTarget, ObjectFound, GraspSuccess, ArrivedAtUser],
            2,
        )
        .unwrap()[5];
        assert_eq!(done.terminal_outcome, Some(Outcome::Success));
        assert!(done.apply_event(Dispatch, 2).is_err());
    }

    #[test]
    fn event_for_transition_maps_edges() {
        let m = new_machine();
        assert_eq!(m.event_for_transition(Idle, Navigating, None), Ok(Dispatch));
        assert!(m.event_for_transition(Idle, Grasping, None).is_err());
        let nav = m.apply_event(Dispatch, 2).unwrap();
        assert_eq!(
            nav.event_for_transition(Navigating, Failed, Some(FailureCategory::SystemHang)),
            Ok(Failure(FailureCategory::SystemHang))
        );
        assert!(nav.event_for_transition(Navigating, Failed, None).is_err());
        assert!(nav
            .event_for_transition(Navigating, Searching, Some(FailureCategory::Other))
            .is_err());
        let recovering = nav
            .apply_event(Failure(FailureCategory::NavigationError), 2)
            .unwrap()
            .apply_event(RetryApproved, 2)
            .unwrap();
        assert_eq!(
            recovering.event_for_transition(Recovering, Navigating, None),
            Ok(RecoveryDone)
        );
        assert!(recovering.event_for_transition(Recovering, Delivering, None).is_err());
    }

    fn all_events() -> Vec<TransitionEvent> {
        let mut events = vec![
            Dispatch,
            ArrivedAtTarget,
            ObjectFound,
            GraspSuccess,
            ArrivedAtUser,
            RetryApproved,
            Abort,
            RecoveryDone,
        ];
        events.extend(FailureCategory::ALL.into_iter().map(Failure));
        events
    }

    /// Exhaustive walk over all accepted event paths of length <= 12: a
    /// successful terminal outcome is only ever entered from DELIVERING.
    #[test]
    fn success_only_through_delivering() {
        let events = all_events();
        let mut frontier = vec![new_machine()];
        let mut seen_success = 0usize;
        for _ in 0..12 {
            let mut next_frontier = Vec::new();
            for machine in &frontier {
                for event in &events {
                    if let Ok(next) = machine.apply_event(*event, 2) {
                        if next.terminal_outcome == Some(Outcome::Success) {
                            assert_eq!(machine.current, Delivering);
                            seen_success += 1;
                        }
                        next_frontier.push(next);
                    }
                }
            }
            // machines are values, so collapsing duplicates keeps the walk exact
            next_frontier.sort_by_key(|m| format!("{m:?}"));
            next_frontier.dedup();
            frontier = next_frontier;
        }
        assert!(seen_success > 0);
    }

    fn arb_event() -> impl Strategy<Value = TransitionEvent> {
        proptest::sample::select(all_events())
    }

    proptest! {
        #[test]
        fn accepted_sequences_stay_on_graph(
            events in proptest::collection::vec(arb_event(), 0..40),
            max_retries in 0u32..4,
        ) {
            let mut machine = new_machine();
            for event in events {
                if let Ok(next) = machine.apply_event(event, max_retries) {
                    prop_assert!(machine.current.can_transition_to(next.current));
                    prop_assert!(next.retries_used >= machine.retries_used);
                    prop_assert!(next.retries_used <= max_retries);
                    if let Some(r) = next.resume_from {
                        prop_assert!(r.is_active_phase());
                    }
                    if next.terminal_outcome.is_some() {
                        prop_assert_eq!(next.current, Idle);
                    }
                    machine = next;
                }
            }
        }
    }
}
