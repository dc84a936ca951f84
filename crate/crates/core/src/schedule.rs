//! Counterbalanced condition orders for a within-subject design.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::trial::Condition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sequence {
    #[serde(rename = "A->B")]
    HiddenFirst,
    #[serde(rename = "B->A")]
    ExternalFirst,
}

impl Sequence {
    /// Conditions in exposure order (period 1, period 2).
    pub fn conditions(self) -> [Condition; 2] {
        match self {
            Sequence::HiddenFirst => [Condition::Hidden, Condition::External],
            Sequence::ExternalFirst => [Condition::External, Condition::Hidden],
        }
    }

    pub fn period_of(self, condition: Condition) -> u8 {
        if self.conditions()[0] == condition {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sequence::HiddenFirst => "A->B",
            Sequence::ExternalFirst => "B->A",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub participant_id: String,
    pub sequence: Sequence,
}

pub fn participant_id(index: usize, n: usize) -> String {
    let width = n.to_string().len().max(2);
    format!("P{:0width$}", index + 1)
}

/// Assigns ceil(n/2) participants to A->B and floor(n/2) to B->A, shuffled
/// under `seed`.
pub fn counterbalance_schedule(n_participants: usize, seed: u64) -> Vec<ScheduleEntry> {
    let mut sequences: Vec<Sequence> = (0..n_participants)
        .map(|i| {
            if i < n_participants.div_ceil(2) {
                Sequence::HiddenFirst
            } else {
                Sequence::ExternalFirst
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sequences.shuffle(&mut rng);
    sequences
        .into_iter()
        .enumerate()
        .map(|(i, sequence)| ScheduleEntry {
            participant_id: participant_id(i, n_participants),
            sequence,
        })
        .collect()
}
