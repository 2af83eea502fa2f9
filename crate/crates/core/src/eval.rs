//! Foreground pixel accuracy. Background (label 0) sites are excluded.

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::Labeling;

pub const BACKGROUND: usize = 0;

/// Fraction of foreground sites of `truth` predicted correctly, or `None`
/// when `truth` has no foreground site.
pub fn accuracy(pred: &Labeling, truth: &Labeling) -> Result<Option<f64>> {
    let mut tally = AccuracyTally::default();
    tally.add(pred, truth)?;
    Ok(tally.value())
}

/// Correct and total foreground counts pooled over several images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyTally {
    pub correct: u64,
    pub total: u64,
}

impl AccuracyTally {
    pub fn add(&mut self, pred: &Labeling, truth: &Labeling) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(CrfError::contract(format!(
                "prediction has {} sites, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.states().iter().zip(truth.states()) {
            if t != BACKGROUND {
                self.total += 1;
                self.correct += u64::from(p == t);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: AccuracyTally) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}
