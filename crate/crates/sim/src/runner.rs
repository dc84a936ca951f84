use std::collections::{BTreeMap, VecDeque};
use std::future::Future;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statebridge_core::dist::derive_seed;
use statebridge_core::protocol::api::{AgentDirective, AgentStateUpdate};
use statebridge_core::protocol::{Decision, TaskIntent};
use statebridge_core::state::{ExecutionState, FailureCategory, Outcome, TaskMachine};
use thiserror::Error;

use crate::config::{ConfigError, SimConfig};
use crate::sample::{grasp_loop, inject_failure, sample_phase_duration};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("server rejected {from} -> {to}: {message}")]
    Rejected {
        from: ExecutionState,
        to: ExecutionState,
        message: String,
    },
}

/// Where the agent reports milestones and receives recovery decisions.
pub trait AgentLink {
    fn report(&mut self, task_id: &str, update: AgentStateUpdate) -> impl Future<Output = Result<(), SimError>> + Send;

    /// Waits for the RETRY/ABORT decision following the latest FAILED report.
    fn await_decision(&mut self, task_id: &str) -> impl Future<Output = Result<AgentDirective, SimError>> + Send;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTransition {
    pub from: ExecutionState,
    pub to: ExecutionState,
    pub failure_category: Option<FailureCategory>,
    pub ts_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub outcome: Outcome,
    pub grasp_attempts: u32,
    pub phase_durations: BTreeMap<ExecutionState, u64>,
    /// Every transition of the task, including an abort decided server-side.
    pub transitions: Vec<SimTransition>,
    /// Each sampled duration in draw order.
    pub durations: Vec<(ExecutionState, u64)>,
}

fn next_phase(phase: ExecutionState) -> ExecutionState {
    use ExecutionState::*;
    match phase {
        Navigating => Searching,
        Searching => Grasping,
        Grasping => Delivering,
        Delivering => Idle,
        other => unreachable!("{other} is not a forward phase"),
    }
}

/// Seed of the task's private RNG stream.
pub fn task_seed(config: &SimConfig, task_id: &str) -> u64 {
    derive_seed(config.rng_seed, task_id)
}

struct Run<'a, L> {
    link: &'a mut L,
    task_id: &'a str,
    clock: u64,
    grasp_attempts: u32,
    out: SimOutcome,
}

impl<L: AgentLink> Run<'_, L> {
    async fn emit(
        &mut self,
        from: ExecutionState,
        to: ExecutionState,
        failure_category: Option<FailureCategory>,
    ) -> Result<(), SimError> {
        let update = AgentStateUpdate {
            from,
            to,
            failure_category,
            ts_ms: Some(self.clock),
            grasp_attempts: Some(self.grasp_attempts),
        };
        self.link.report(self.task_id, update).await?;
        self.out.transitions.push(SimTransition {
            from,
            to,
            failure_category,
            ts_ms: self.clock,
        });
        Ok(())
    }

    fn spend(&mut self, phase: ExecutionState, ms: u64) {
        self.clock += ms;
        *self.out.phase_durations.entry(phase).or_insert(0) += ms;
        self.out.durations.push((phase, ms));
    }
}

/// Walks one task through its phases starting at `dispatch_ts_ms`.
///
/// The clock advances by a phase's full duration before its outcome is
/// reported; a failed phase is re-entered from the start after recovery.
pub async fn run_task<L: AgentLink>(
    link: &mut L,
    task_id: &str,
    intent: &TaskIntent,
    config: &SimConfig,
    dispatch_ts_ms: u64,
) -> Result<SimOutcome, SimError> {
    use ExecutionState::*;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(config, task_id));
    tracing::debug!(task_id, object = %intent.object, "running task");
    let mut run = Run {
        link,
        task_id,
        clock: dispatch_ts_ms,
        grasp_attempts: 0,
        out: SimOutcome {
            outcome: Outcome::Success,
            grasp_attempts: 0,
            phase_durations: BTreeMap::new(),
            transitions: Vec::new(),
            durations: Vec::new(),
        },
    };

    run.emit(Idle, Navigating, None).await?;
    let mut phase = Navigating;
    loop {
        let failure = if phase == Grasping {
            let (landed, attempts) = grasp_loop(config.grasp_success_probability, config.grasp_attempt_cap, &mut rng);
            run.grasp_attempts += attempts;
            for _ in 0..attempts {
                let ms = sample_phase_duration(Grasping, config, &mut rng)?;
                run.spend(Grasping, ms);
            }
            let injected = inject_failure(Grasping, config, &mut rng)?;
            if landed {
                injected
            } else {
                Some(FailureCategory::GraspFailure)
            }
        } else {
            let ms = sample_phase_duration(phase, config, &mut rng)?;
            run.spend(phase, ms);
            inject_failure(phase, config, &mut rng)?
        };

        let Some(mut category) = failure else {
            let next = next_phase(phase);
            run.emit(phase, next, None).await?;
            if next == Idle {
                break;
            }
            phase = next;
            continue;
        };

        run.emit(phase, Failed, Some(category)).await?;
        // phase stays the resume target while recovery itself keeps failing
        loop {
            let directive = run.link.await_decision(task_id).await?;
            run.clock = run.clock.max(directive.ts_ms);
            if directive.decision == Decision::Abort {
                run.out.transitions.push(SimTransition {
                    from: Failed,
                    to: Idle,
                    failure_category: None,
                    ts_ms: run.clock,
                });
                run.out.outcome = Outcome::Failure(category);
                run.out.grasp_attempts = run.grasp_attempts;
                return Ok(run.out);
            }
            run.emit(Failed, Recovering, None).await?;
            let ms = sample_phase_duration(Recovering, config, &mut rng)?;
            run.spend(Recovering, ms);
            match inject_failure(Recovering, config, &mut rng)? {
                Some(again) => {
                    category = again;
                    run.emit(Recovering, Failed, Some(category)).await?;
                }
                None => {
                    run.emit(Recovering, phase, None).await?;
                    break;
                }
            }
        }
    }
    run.out.outcome = Outcome::Success;
    run.out.grasp_attempts = run.grasp_attempts;
    Ok(run.out)
}

/// In-process link that validates every report against the state machine
/// and answers failures from a fixed approval sequence, retrying by default
/// while budget remains.
#[derive(Debug, Clone)]
pub struct OfflineLink {
    pub machine: TaskMachine,
    pub max_retries: u32,
    pub approvals: VecDeque<Decision>,
    /// Virtual ms between a FAILED report and its decision.
    pub decision_latency_ms: u64,
    pub reports: Vec<AgentStateUpdate>,
    last_ts: u64,
}

impl OfflineLink {
    pub fn new(max_retries: u32) -> Self {
        OfflineLink {
            machine: TaskMachine::new(),
            max_retries,
            approvals: VecDeque::new(),
            decision_latency_ms: 0,
            reports: Vec::new(),
            last_ts: 0,
        }
    }

    pub fn with_approvals(mut self, approvals: impl IntoIterator<Item = Decision>) -> Self {
        self.approvals = approvals.into_iter().collect();
        self
    }
}

impl AgentLink for OfflineLink {
    fn report(
        &mut self,
        _task_id: &str,
        update: AgentStateUpdate,
    ) -> impl Future<Output = Result<(), SimError>> + Send {
        let result = self
            .machine
            .event_for_transition(update.from, update.to, update.failure_category)
            .and_then(|event| self.machine.apply_event(event, self.max_retries))
            .map_err(|e| SimError::Rejected {
                from: update.from,
                to: update.to,
                message: e.to_string(),
            })
            .map(|next| {
                self.machine = next;
                self.last_ts = update.ts_ms.unwrap_or(self.last_ts);
                self.reports.push(update);
            });
        std::future::ready(result)
    }

    fn await_decision(&mut self, _task_id: &str) -> impl Future<Output = Result<AgentDirective, SimError>> + Send {
        let ts_ms = self.last_ts + self.decision_latency_ms;
        let decision = if self.machine.retries_left(self.max_retries) == 0 {
            Decision::Abort
        } else {
            self.approvals.pop_front().unwrap_or(Decision::Retry)
        };
        if decision == Decision::Abort {
            self.machine = self
                .machine
                .apply_event(statebridge_core::TransitionEvent::Abort, self.max_retries)
                .expect("decisions follow a FAILED report");
        }
        std::future::ready(Ok(AgentDirective { decision, ts_ms }))
    }
}
