//! Persisted per-trial records (one JSON object per line).

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ObjectKind;
use crate::state::{ExecutionState, FailureCategory, UnknownName};

/// Experimental condition: A is hidden execution, B is externalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Hidden,
    External,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Hidden => "HIDDEN",
            Condition::External => "EXTERNAL",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Condition::Hidden => 'A',
            Condition::External => 'B',
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "HIDDEN" | "A" => Ok(Condition::Hidden),
            "EXTERNAL" | "B" => Ok(Condition::External),
            _ => Err(UnknownName(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeLabel {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionStamp {
    pub to: ExecutionState,
    pub ts_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub participant_id: String,
    pub condition: Condition,
    pub period: u8,
    pub object: ObjectKind,
    pub outcome: OutcomeLabel,
    pub failure_category: Option<FailureCategory>,
    pub ready_ts_ms: u64,
    pub dispatch_ts_ms: u64,
    pub terminal_ts_ms: u64,
    pub grasp_attempts: u32,
    pub transitions: Vec<TransitionStamp>,
}

impl TrialRecord {
    pub fn is_success(&self) -> bool {
        self.outcome == OutcomeLabel::Success
    }
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("trial log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trial log {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Append-only trial log, idempotent per `trial_id`.
#[derive(Debug)]
pub struct TrialLog {
    path: PathBuf,
    written: HashSet<String>,
}

impl TrialLog {
    /// Opens (or creates) the log and indexes the trial ids already present.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let path = path.into();
        let written = if path.exists() {
            read_trials(&path)?.into_iter().map(|t| t.trial_id).collect()
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|source| StorageError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            File::create(&path).map_err(|source| StorageError::Io {
                path: path.clone(),
                source,
            })?;
            HashSet::new()
        };
        Ok(TrialLog { path, written })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends the record unless its id was already written. Returns whether
    /// a line was written.
    pub fn append(&mut self, record: &TrialRecord) -> Result<bool, StorageError> {
        if self.written.contains(&record.trial_id) {
            return Ok(false);
        }
        let io_err = |source| StorageError::Io {
            path: self.path.clone(),
            source,
        };
        let mut line = serde_json::to_string(record).expect("trial records always serialize");
        line.push('\n');
        let mut file = OpenOptions::new().append(true).open(&self.path).map_err(io_err)?;
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.flush().map_err(io_err)?;
        self.written.insert(record.trial_id.clone());
        Ok(true)
    }
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>, StorageError> {
    let file = File::open(path).map_err(|source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut trials = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StorageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| StorageError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        trials.push(record);
    }
    Ok(trials)
}
