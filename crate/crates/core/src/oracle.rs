//! The labeling authority and its budget.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::record::{CandidatePair, MatchSet};

/// Why a pair was sent to the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Seed,
    Validation,
    /// Active-learning query in `chunk` (0-based) at `iteration` (1-based).
    Loop { chunk: usize, iteration: usize },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Seed => f.write_str("seed"),
            Provenance::Validation => f.write_str("validation"),
            Provenance::Loop { chunk, iteration } => write!(f, "loop-{chunk}-{iteration}"),
        }
    }
}

impl core::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seed" => Ok(Provenance::Seed),
            "validation" => Ok(Provenance::Validation),
            _ => {
                let bad = || alloc::format!("unknown provenance {s:?}");
                let rest = s.strip_prefix("loop-").ok_or_else(bad)?;
                let (c, i) = rest.split_once('-').ok_or_else(bad)?;
                Ok(Provenance::Loop {
                    chunk: c.parse().map_err(|_| bad())?,
                    iteration: i.parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("labeling budget exhausted")]
    BudgetExhausted,
    #[error("timed out waiting for labels")]
    Timeout,
    #[error("oracle transport failure: {0}")]
    Transport(String),
}

/// Counts answered queries against an optional hard cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleBudget {
    hard_cap: Option<usize>,
    consumed: usize,
}

impl OracleBudget {
    pub fn new(hard_cap: Option<usize>) -> Self {
        Self { hard_cap, consumed: 0 }
    }

    pub fn hard_cap(&self) -> Option<usize> {
        self.hard_cap
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn remaining(&self) -> Option<usize> {
        self.hard_cap.map(|c| c.saturating_sub(self.consumed))
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == Some(0)
    }

    /// Charges one answered query; fails without charging when the cap is hit.
    pub fn consume(&mut self) -> Result<(), OracleError> {
        if self.is_exhausted() {
            return Err(OracleError::BudgetExhausted);
        }
        self.consumed += 1;
        Ok(())
    }
}

/// Outcome of one labeling request. `answers[i]` is the label for the
/// `i`-th requested pair, `None` when it was not answered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelBatch {
    pub answers: Vec<Option<u8>>,
    /// The budget ran out before every pair was answered.
    pub exhausted: bool,
    /// The wait for answers was abandoned.
    pub timed_out: bool,
}

impl LabelBatch {
    pub fn answered(&self) -> usize {
        self.answers.iter().filter(|a| a.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.answers.iter().all(Option::is_some)
    }
}

/// Snapshot of the training loop, published to the oracle so interactive
/// front ends can show it.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub chunk: usize,
    pub iteration: usize,
    pub f1_history: &'a [f64],
    pub consumed: usize,
}

/// Something that returns perfect binary labels for pairs.
pub trait Oracle {
    /// Labels `pairs` in order. Transport failures are errors; budget
    /// exhaustion and timeouts are reported through the batch flags, along
    /// with any answers already given.
    fn label(&mut self, pairs: &[CandidatePair], provenance: Provenance) -> Result<LabelBatch, OracleError>;

    /// Labels consumed so far.
    fn consumed(&self) -> usize;

    fn progress(&mut self, _progress: &Progress<'_>) {}
}

/// Oracle backed by a known match set.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle<'a> {
    truth: &'a MatchSet,
    budget: OracleBudget,
}

impl<'a> GroundTruthOracle<'a> {
    pub fn new(truth: &'a MatchSet, hard_cap: Option<usize>) -> Self {
        Self { truth, budget: OracleBudget::new(hard_cap) }
    }

    pub fn budget(&self) -> &OracleBudget {
        &self.budget
    }

    /// 1 iff the pair is a true match; charges the budget.
    pub fn ground_truth_label(&mut self, pair: &CandidatePair) -> Result<u8, OracleError> {
        self.budget.consume()?;
        Ok(u8::from(self.truth.contains(pair)))
    }
}

impl Oracle for GroundTruthOracle<'_> {
    fn label(&mut self, pairs: &[CandidatePair], _provenance: Provenance) -> Result<LabelBatch, OracleError> {
        let mut batch = LabelBatch::default();
        for p in pairs {
            match self.ground_truth_label(p) {
                Ok(y) => batch.answers.push(Some(y)),
                Err(OracleError::BudgetExhausted) => {
                    batch.answers.push(None);
                    batch.exhausted = true;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(batch)
    }

    fn consumed(&self) -> usize {
        self.budget.consumed()
    }
}
