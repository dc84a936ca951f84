//! Counterbalanced batch: every scheduled participant runs one trial per
//! condition in their assigned order against a real server and agent.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Arc;
use std::time::{Duration, Instant};

use statebridge_core::dist::derive_seed;
use statebridge_core::mediator::ScriptedUser;
use statebridge_core::metrics::{aggregate_report, render_text, MetricsError, Report};
use statebridge_core::protocol::api::CreateSession;
use statebridge_core::protocol::{decode_event, StreamEvent};
use statebridge_core::schedule::{counterbalance_schedule, ScheduleEntry};
use statebridge_core::trial::{Condition, StorageError, TrialLog, TrialRecord};
use statebridge_server::{shared, Coordinator};
use statebridge_sim::{run_agent, HttpAgent, SimError};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};
use tokio::task::JoinHandle;

use crate::client::{run_trial, ClientError, SessionClient};
use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Agent(#[from] SimError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("server setup: {0}")]
    Server(String),
    #[error("{missing} scheduled trial(s) did not reach a terminal event")]
    Incomplete { missing: usize },
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub seed: Option<u64>,
    pub participants: Option<usize>,
    /// Output directory; nothing is written when absent.
    pub out: Option<PathBuf>,
    /// Run only this condition (no paired report).
    pub condition: Option<Condition>,
    /// Concurrent participants, each with their own agent.
    pub parallel: usize,
    /// Run server and agents as child processes of this executable.
    pub split_process: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SessionTranscript {
    pub session_id: String,
    pub participant_id: String,
    pub condition: Condition,
    pub events: Vec<StreamEvent>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub seed: u64,
    pub schedule: Vec<ScheduleEntry>,
    pub trials: Vec<TrialRecord>,
    pub transcripts: Vec<SessionTranscript>,
    pub report: Option<Report>,
    pub wall: Duration,
}

/// A running server plus agents, in-process or as child processes.
pub struct Stack {
    pub base_url: String,
    tasks: Vec<JoinHandle<()>>,
    children: Vec<Child>,
}

impl Stack {
    pub async fn in_process(
        config: &ExperimentConfig,
        seed: u64,
        agents: usize,
        trial_log: Option<PathBuf>,
    ) -> Result<Self, BatchError> {
        let coordinator =
            Coordinator::new(config.server_config(trial_log)).map_err(|e| BatchError::Server(e.to_string()))?;
        let listener = tokio::net::TcpListener::bind(config.server.listen).await?;
        let base_url = format!("http://{}", listener.local_addr()?);
        let state = shared(coordinator);
        let mut tasks = vec![tokio::spawn(async move {
            if let Err(e) = statebridge_server::serve(listener, state).await {
                tracing::error!("server stopped: {e}");
            }
        })];
        HttpAgent::new(&base_url, 0.0).register().await?;
        let sim = config.batch_sim(seed);
        for _ in 0..agents.max(1) {
            let (url, sim) = (base_url.clone(), sim.clone());
            tasks.push(tokio::spawn(async move {
                if let Err(e) = run_agent(&url, &sim, None).await {
                    tracing::error!("agent stopped: {e}");
                }
            }));
        }
        Ok(Stack {
            base_url,
            tasks,
            children: Vec::new(),
        })
    }

    /// Starts `exe serve` and `exe agent` with `config_path`.
    pub async fn split(
        exe: &Path,
        config_path: &Path,
        seed: u64,
        agents: usize,
        trial_log: Option<&Path>,
    ) -> Result<Self, BatchError> {
        let mut serve = Command::new(exe);
        serve
            .arg("serve")
            .arg("--config")
            .arg(config_path)
            .arg("--seed")
            .arg(seed.to_string())
            .stdout(Stdio::piped())
            .kill_on_drop(true);
        if let Some(log) = trial_log {
            serve.arg("--trial-log").arg(log);
        }
        let mut server = serve.spawn()?;
        let stdout = server
            .stdout
            .take()
            .ok_or_else(|| BatchError::Server("no server stdout".into()))?;
        let mut first = String::new();
        BufReader::new(stdout).read_line(&mut first).await?;
        let base_url = first
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| BatchError::Server(format!("unexpected server banner `{}`", first.trim())))?
            .to_string();
        HttpAgent::new(&base_url, 0.0).register().await?;
        let mut children = vec![server];
        for _ in 0..agents.max(1) {
            children.push(
                Command::new(exe)
                    .arg("agent")
                    .arg("--config")
                    .arg(config_path)
                    .arg("--server")
                    .arg(&base_url)
                    .arg("--seed")
                    .arg(seed.to_string())
                    .kill_on_drop(true)
                    .spawn()?,
            );
        }
        Ok(Stack {
            base_url,
            tasks: Vec::new(),
            children,
        })
    }

    pub async fn shutdown(mut self) {
        for task in &self.tasks {
            task.abort();
        }
        for child in &mut self.children {
            let _ = child.kill().await;
        }
    }
}

struct PlannedTrial {
    session_id: String,
    participant_id: String,
    condition: Condition,
    period: u8,
}

pub async fn run_batch(config: &ExperimentConfig, opts: &BatchOptions) -> Result<BatchResult, BatchError> {
    let started = Instant::now();
    config.validate()?;
    let seed = opts.seed.unwrap_or(config.experiment.seed);
    let n = opts.participants.unwrap_or(config.experiment.participants);
    if n < 2 {
        return Err(ConfigError::Invalid("at least 2 participants are required".into()).into());
    }
    let schedule = counterbalance_schedule(n, derive_seed(seed, "schedule"));

    let trial_log = match &opts.out {
        Some(out) => {
            std::fs::create_dir_all(out.join("transcripts"))?;
            for stale in ["trials.jsonl", "report.json", "report.txt"] {
                let _ = std::fs::remove_file(out.join(stale));
            }
            for entry in std::fs::read_dir(out.join("transcripts"))? {
                std::fs::remove_file(entry?.path())?;
            }
            Some(out.join("trials.jsonl"))
        }
        None => None,
    };

    let agents = opts.parallel.max(1);
    let stack = match &opts.split_process {
        Some(exe) => {
            let dir = opts
                .out
                .clone()
                .ok_or_else(|| ConfigError::Invalid("--split-process needs --out".into()))?;
            let path = dir.join("effective_config.toml");
            let text = toml::to_string(config).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            std::fs::write(&path, text)?;
            Stack::split(exe, &path, seed, agents, trial_log.as_deref()).await?
        }
        None => Stack::in_process(config, seed, agents, trial_log.clone()).await?,
    };
    let result = drive(config, opts, seed, &schedule, &stack.base_url).await;
    stack.shutdown().await;
    let (trials, transcripts) = result?;

    let report = if opts.condition.is_none() {
        Some(aggregate_report(&trials)?)
    } else {
        None
    };
    if let Some(out) = &opts.out {
        write_artifacts(out, &schedule, &trials, &transcripts, report.as_ref())?;
    }
    Ok(BatchResult {
        seed,
        schedule,
        trials,
        transcripts,
        report,
        wall: started.elapsed(),
    })
}

async fn drive(
    config: &ExperimentConfig,
    opts: &BatchOptions,
    seed: u64,
    schedule: &[ScheduleEntry],
    base_url: &str,
) -> Result<(Vec<TrialRecord>, Vec<SessionTranscript>), BatchError> {
    let client = SessionClient::new(base_url);

    // sessions are created up front so ids, and with them task seeds, do not
    // depend on how participants interleave
    let mut plan: Vec<Vec<PlannedTrial>> = Vec::new();
    for entry in schedule {
        let mut trials = Vec::new();
        for condition in entry.sequence.conditions() {
            if opts.condition.is_some_and(|c| c != condition) {
                continue;
            }
            let period = entry.sequence.period_of(condition);
            let session_id = client
                .create_session(&CreateSession {
                    participant_id: entry.participant_id.clone(),
                    condition,
                    period,
                })
                .await?;
            trials.push(PlannedTrial {
                session_id,
                participant_id: entry.participant_id.clone(),
                condition,
                period,
            });
        }
        plan.push(trials);
    }

    let user_policy = config.user;
    let permits = Arc::new(tokio::sync::Semaphore::new(opts.parallel.max(1)));
    let mut handles = Vec::new();
    for trials in plan {
        let client = client.clone();
        let permits = permits.clone();
        handles.push(tokio::spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore open");
            for t in &trials {
                let key = format!("user/{}/{}", t.participant_id, t.condition);
                let mut user = ScriptedUser::new(user_policy, derive_seed(seed, &key));
                run_trial(&client, &t.session_id, t.condition, &mut user).await?;
            }
            Ok::<_, ClientError>(trials)
        }));
    }
    let mut planned = Vec::new();
    for handle in handles {
        let trials = handle.await.map_err(|e| BatchError::Server(e.to_string()))??;
        planned.extend(trials);
    }

    let mut records = Vec::new();
    let mut transcripts = Vec::new();
    let mut missing = 0;
    for t in &planned {
        let text = client.transcript(&t.session_id).await?;
        let events = text
            .lines()
            .map(decode_event)
            .collect::<Result<Vec<_>, _>>()
            .map_err(ClientError::from)?;
        let trials = client.session_trials(&t.session_id).await?;
        match trials.as_slice() {
            [record] if record.period == t.period && record.condition == t.condition => records.push(record.clone()),
            _ => missing += 1,
        }
        transcripts.push(SessionTranscript {
            session_id: t.session_id.clone(),
            participant_id: t.participant_id.clone(),
            condition: t.condition,
            events,
        });
    }
    if missing > 0 {
        return Err(BatchError::Incomplete { missing });
    }
    Ok((records, transcripts))
}

fn write_artifacts(
    out: &Path,
    schedule: &[ScheduleEntry],
    trials: &[TrialRecord],
    transcripts: &[SessionTranscript],
    report: Option<&Report>,
) -> Result<(), BatchError> {
    // the server appended trials in completion order; rewrite in schedule order
    let log_path = out.join("trials.jsonl");
    let tmp = out.join("trials.jsonl.tmp");
    let _ = std::fs::remove_file(&tmp);
    let mut log = TrialLog::open(&tmp)?;
    for record in trials {
        log.append(record)?;
    }
    drop(log);
    std::fs::rename(&tmp, &log_path)?;

    for t in transcripts {
        let text = statebridge_core::protocol::encode_transcript(&t.events).map_err(ClientError::from)?;
        std::fs::write(out.join("transcripts").join(format!("{}.jsonl", t.session_id)), text)?;
    }
    std::fs::write(
        out.join("schedule.json"),
        serde_json::to_string_pretty(schedule).expect("schedule serializes"),
    )?;
    if let Some(report) = report {
        std::fs::write(
            out.join("report.json"),
            serde_json::to_string_pretty(report).expect("report serializes"),
        )?;
        std::fs::write(out.join("report.txt"), render_text(report))?;
    }
    Ok(())
}
