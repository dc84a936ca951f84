//! Objective trial metrics and the condition comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ObjectKind;
use crate::state::FailureCategory;
use crate::stats::{mean, paired_t_test, sample_sd, success_rate_test, McNemarResult, PairedTestResult};
use crate::trial::{Condition, TrialRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trial {trial_id}: {reason}")]
    MalformedTrial { trial_id: String, reason: String },
    #[error("unpaired data: {0}")]
    UnpairedData(String),
}

/// Durations are kept in integer milliseconds so that
/// `end_to_end = initiation + execution` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub initiation_ms: u64,
    pub execution_ms: u64,
    pub end_to_end_ms: u64,
    pub grasp_attempts: u32,
    pub success: bool,
    pub failure_category: Option<FailureCategory>,
}

impl TrialMetrics {
    pub fn initiation_s(&self) -> f64 {
        self.initiation_ms as f64 / 1000.0
    }

    pub fn execution_s(&self) -> f64 {
        self.execution_ms as f64 / 1000.0
    }

    pub fn end_to_end_s(&self) -> f64 {
        self.end_to_end_ms as f64 / 1000.0
    }
}

pub fn extract_metrics(trial: &TrialRecord) -> Result<TrialMetrics, MetricsError> {
    let (ready, dispatch, terminal) = (trial.ready_ts_ms, trial.dispatch_ts_ms, trial.terminal_ts_ms);
    if !(ready <= dispatch && dispatch <= terminal) {
        return Err(MetricsError::MalformedTrial {
            trial_id: trial.trial_id.clone(),
            reason: format!("timestamps not monotone: ready {ready}, dispatch {dispatch}, terminal {terminal}"),
        });
    }
    Ok(TrialMetrics {
        initiation_ms: dispatch - ready,
        execution_ms: terminal - dispatch,
        end_to_end_ms: terminal - ready,
        grasp_attempts: trial.grasp_attempts,
        success: trial.is_success(),
        failure_category: trial.failure_category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "Init. (s)")]
    Initiation,
    #[serde(rename = "Exec. (s)")]
    Execution,
    #[serde(rename = "Total (s)")]
    Total,
    #[serde(rename = "Grasp Att.")]
    GraspAttempts,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Initiation,
        Metric::Execution,
        Metric::Total,
        Metric::GraspAttempts,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Initiation => "Init. (s)",
            Metric::Execution => "Exec. (s)",
            Metric::Total => "Total (s)",
            Metric::GraspAttempts => "Grasp Att.",
        }
    }

    pub fn value(self, m: &TrialMetrics) -> f64 {
        match self {
            Metric::Initiation => m.initiation_s(),
            Metric::Execution => m.execution_s(),
            Metric::Total => m.end_to_end_s(),
            Metric::GraspAttempts => f64::from(m.grasp_attempts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub hidden_mean: f64,
    pub hidden_sd: f64,
    pub external_mean: f64,
    pub external_sd: f64,
    /// Differences are external minus hidden.
    pub test: PairedTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub hidden_rate: f64,
    pub external_rate: f64,
    pub mcnemar: McNemarResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRow {
    pub metric: Metric,
    pub first_mean: f64,
    pub second_mean: f64,
    pub hidden_first_mean: f64,
    pub hidden_second_mean: f64,
    pub external_first_mean: f64,
    pub external_second_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRow {
    pub object: ObjectKind,
    pub requests: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_pairs: usize,
    pub metrics: Vec<MetricRow>,
    pub success: SuccessRow,
    pub failures: BTreeMap<Condition, BTreeMap<FailureCategory, usize>>,
    pub period_split: Vec<PeriodRow>,
    pub objects: Vec<ObjectRow>,
}

impl Report {
    pub fn row(&self, metric: Metric) -> &MetricRow {
        self.metrics
            .iter()
            .find(|r| r.metric == metric)
            .expect("every metric has a row")
    }
}

struct Pair<'a> {
    hidden: (&'a TrialRecord, TrialMetrics),
    external: (&'a TrialRecord, TrialMetrics),
}

fn pair_trials(trials: &[TrialRecord]) -> Result<Vec<Pair<'_>>, MetricsError> {
    let mut by_participant: BTreeMap<&str, (Option<&TrialRecord>, Option<&TrialRecord>)> = BTreeMap::new();
    for trial in trials {
        let slot = by_participant.entry(trial.participant_id.as_str()).or_default();
        let cell = match trial.condition {
            Condition::Hidden => &mut slot.0,
            Condition::External => &mut slot.1,
        };
        if cell.is_some() {
            return Err(MetricsError::UnpairedData(format!(
                "participant {} has more than one {} trial",
                trial.participant_id, trial.condition
            )));
        }
        *cell = Some(trial);
    }
    let mut pairs = Vec::with_capacity(by_participant.len());
    for (participant, slot) in by_participant {
        let (Some(h), Some(e)) = slot else {
            return Err(MetricsError::UnpairedData(format!(
                "participant {participant} lacks a trial in one condition"
            )));
        };
        pairs.push(Pair {
            hidden: (h, extract_metrics(h)?),
            external: (e, extract_metrics(e)?),
        });
    }
    if pairs.len() < 2 {
        return Err(MetricsError::UnpairedData(format!(
            "need at least 2 complete pairs, got {}",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// Builds the condition comparison from a set of trials containing exactly
/// one hidden and one externalized trial per participant.
pub fn aggregate_report(trials: &[TrialRecord]) -> Result<Report, MetricsError> {
    let pairs = pair_trials(trials)?;

    let metrics = Metric::ALL
        .iter()
        .map(|&metric| {
            let a: Vec<f64> = pairs.iter().map(|p| metric.value(&p.hidden.1)).collect();
            let b: Vec<f64> = pairs.iter().map(|p| metric.value(&p.external.1)).collect();
            MetricRow {
                metric,
                hidden_mean: mean(&a),
                hidden_sd: sample_sd(&a),
                external_mean: mean(&b),
                external_sd: sample_sd(&b),
                test: paired_t_test(&a, &b).expect("pairs are aligned and n >= 2"),
            }
        })
        .collect();

    let a_ok: Vec<bool> = pairs.iter().map(|p| p.hidden.1.success).collect();
    let b_ok: Vec<bool> = pairs.iter().map(|p| p.external.1.success).collect();
    let rate = |xs: &[bool]| xs.iter().filter(|x| **x).count() as f64 / xs.len() as f64;
    let success = SuccessRow {
        hidden_rate: rate(&a_ok),
        external_rate: rate(&b_ok),
        mcnemar: success_rate_test(&a_ok, &b_ok).expect("aligned"),
    };

    let mut failures: BTreeMap<Condition, BTreeMap<FailureCategory, usize>> = BTreeMap::new();
    for condition in [Condition::Hidden, Condition::External] {
        let counts = failures.entry(condition).or_default();
        for category in FailureCategory::ALL {
            counts.insert(category, 0);
        }
    }
    let all: Vec<(&TrialRecord, TrialMetrics)> = pairs.iter().flat_map(|p| [p.hidden, p.external]).collect();
    for (trial, m) in &all {
        if let (false, Some(category)) = (m.success, m.failure_category) {
            *failures
                .get_mut(&trial.condition)
                .and_then(|c| c.get_mut(&category))
                .expect("prefilled") += 1;
        }
    }

    let period_split = Metric::ALL
        .iter()
        .map(|&metric| {
            let cell = |condition: Option<Condition>, period: u8| {
                let xs: Vec<f64> = all
                    .iter()
                    .filter(|(t, _)| t.period == period && condition.is_none_or(|c| t.condition == c))
                    .map(|(_, m)| metric.value(m))
                    .collect();
                mean(&xs)
            };
            PeriodRow {
                metric,
                first_mean: cell(None, 1),
                second_mean: cell(None, 2),
                hidden_first_mean: cell(Some(Condition::Hidden), 1),
                hidden_second_mean: cell(Some(Condition::Hidden), 2),
                external_first_mean: cell(Some(Condition::External), 1),
                external_second_mean: cell(Some(Condition::External), 2),
            }
        })
        .collect();

    let objects = ObjectKind::ALL
        .iter()
        .map(|&object| {
            let of_kind: Vec<bool> = all
                .iter()
                .filter(|(t, _)| t.object == object)
                .map(|(_, m)| m.success)
                .collect();
            ObjectRow {
                object,
                requests: of_kind.len(),
                success_rate: if of_kind.is_empty() { f64::NAN } else { rate(&of_kind) },
            }
        })
        .collect();

    Ok(Report {
        n_pairs: pairs.len(),
        metrics,
        success,
        failures,
        period_split,
        objects,
    })
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001***".to_string()
    } else if p < 0.05 {
        format!("{p:.3}*")
    } else {
        format!("{p:.3}")
    }
}

/// Aligned plain-text rendering of a report.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let df = report.n_pairs.saturating_sub(1);
    let _ = writeln!(
        out,
        "Objective metrics, A = hidden, B = externalized (n = {} pairs)",
        report.n_pairs
    );
    let _ = writeln!(out, "Differences are B - A.");
    let _ = writeln!(out);
    let t_head = format!("t({df})");
    let _ = writeln!(
        out,
        "{:<12} {:>18} {:>18} {:>8} {:>10} {:>10}",
        "Metric", "A Mean (SD)", "B Mean (SD)", t_head, "p", "Cohen's d"
    );
    for row in &report.metrics {
        let _ = writeln!(
            out,
            "{:<12} {:>18} {:>18} {:>8.2} {:>10} {:>10.2}",
            row.metric.label(),
            format!("{:.2} ({:.2})", row.hidden_mean, row.hidden_sd),
            format!("{:.2} ({:.2})", row.external_mean, row.external_sd),
            row.test.t_stat,
            fmt_p(row.test.p_two_sided),
            row.test.cohens_d,
        );
    }
    let s = &report.success;
    let _ = writeln!(
        out,
        "{:<12} {:>18} {:>18} {:>8} {:>10}",
        "Suc. Rate (%)",
        format!("{:.1}", s.hidden_rate * 100.0),
        format!("{:.1}", s.external_rate * 100.0),
        "--",
        fmt_p(s.mcnemar.p_two_sided),
    );

    let _ = writeln!(out);
    let _ = writeln!(out, "Failure modes (failed trials)");
    let _ = writeln!(out, "{:<18} {:>6} {:>6}", "Category", "A", "B");
    for category in FailureCategory::ALL {
        let count = |c: Condition| {
            report
                .failures
                .get(&c)
                .and_then(|m| m.get(&category))
                .copied()
                .unwrap_or(0)
        };
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>6}",
            category.as_str(),
            count(Condition::Hidden),
            count(Condition::External)
        );
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "Period split (first vs second exposure means)");
    let _ = writeln!(
        out,
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "Metric", "First", "Second", "A first", "A second", "B first", "B second"
    );
    for row in &report.period_split {
        let _ = writeln!(
            out,
            "{:<12} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
            row.metric.label(),
            row.first_mean,
            row.second_mean,
            row.hidden_first_mean,
            row.hidden_second_mean,
            row.external_first_mean,
            row.external_second_mean,
        );
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "Objects");
    let _ = writeln!(out, "{:<8} {:>9} {:>10}", "Object", "Requests", "Success %");
    for row in &report.objects {
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>10.1}",
            row.object.as_str(),
            row.requests,
            row.success_rate * 100.0
        );
    }
    out
}
