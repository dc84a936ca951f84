//! Shared building blocks for the statebridge coordination system: the
//! task-level state machine, the line protocol, the externalization policy,
//! trial records, and the statistics used to compare conditions.

pub mod dist;
pub mod mediator;
pub mod metrics;
pub mod protocol;
pub mod schedule;
pub mod state;
pub mod stats;
pub mod trial;

pub use protocol::{
    decode_event, encode_event, Decision, EventKind, ExternalizationMessage, ObjectKind, Payload, ProtocolError,
    StreamEvent, TaskIntent,
};
pub use state::{
    legal_successors, new_machine, ExecutionState, FailureCategory, Outcome, StateError, TaskMachine, TransitionEvent,
};
pub use trial::{Condition, TrialRecord};
