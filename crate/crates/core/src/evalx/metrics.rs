//! Binary confusion matrix and unweighted macro metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEGENERATE_CLASS: &str = "degenerate class";

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }
}

pub fn confusion(preds: &[usize], golds: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(invalid(format!(
            "prediction count {} differs from gold count {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(invalid("no predictions to score"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in preds.iter().zip(golds) {
        if p > 1 || g > 1 {
            return Err(invalid(format!("labels must be 0 or 1, got pred {p}, gold {g}")));
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

/// Accuracy plus macro precision/recall as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub flags: Vec<String>,
}

/// A class with no predictions (resp. no gold members) scores precision
/// (resp. recall) 0 and raises the "degenerate class" flag.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(invalid("confusion matrix is all zeros"));
    }
    let mut degenerate = false;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for c in 0..2 {
        let col: u64 = cm.counts[0][c] + cm.counts[1][c];
        let row: u64 = cm.counts[c][0] + cm.counts[c][1];
        let hit = cm.counts[c][c] as f64;
        if col == 0 {
            degenerate = true;
        } else {
            precision += hit / col as f64;
        }
        if row == 0 {
            degenerate = true;
        } else {
            recall += hit / row as f64;
        }
    }
    Ok(MacroMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: precision / 2.0,
        macro_recall: recall / 2.0,
        flags: if degenerate { vec![DEGENERATE_CLASS.to_string()] } else { vec![] },
    })
}

pub fn score(preds: &[usize], golds: &[usize]) -> Result<MacroMetrics> {
    macro_metrics(&confusion(preds, golds)?)
}
