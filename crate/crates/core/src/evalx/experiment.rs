//! Result rows, shard merging, and the results table.

use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::Result;
use crate::evalx::metrics::MacroMetrics;

/// Test-split cluster ids come from nearest-fit-point assignment, not from
/// the clustering itself.
pub const ASSIGNED_TEST_CLUSTERS: &str = "test cluster ids by nearest-point assignment";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub split: Split,
    /// Percentages, unrounded.
    pub accuracy: f64,
    #[serde(rename = "mP")]
    pub macro_precision: f64,
    #[serde(rename = "mR")]
    pub macro_recall: f64,
    pub seed: u64,
    pub wall_clock_s: Option<f64>,
    pub flags: Vec<String>,
}

impl MetricsRow {
    pub fn new(variant: &str, split: Split, m: &MacroMetrics, seed: u64) -> Self {
        Self {
            variant: variant.to_string(),
            split,
            accuracy: 100.0 * m.accuracy,
            macro_precision: 100.0 * m.macro_precision,
            macro_recall: 100.0 * m.macro_recall,
            seed,
            wall_clock_s: None,
            flags: m.flags.clone(),
        }
    }
}

fn split_rank(s: Split) -> usize {
    match s {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }
}

/// Concatenates per-variant shards, ordered by variant name then split.
pub fn merge_shards(shards: Vec<Vec<MetricsRow>>) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = shards.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.variant.cmp(&b.variant).then(split_rank(a.split).cmp(&split_rank(b.split))));
    rows
}

pub fn rows_to_jsonl(rows: &[MetricsRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

pub fn rows_from_jsonl(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Text table with one line per variant and Acc./mP/mR under Validation
/// and Test, to two decimals.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let mut variants: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    variants.dedup();
    let width = variants.iter().map(|v| v.len()).max().unwrap_or(0).max("Model".len());
    let cell = |v: &str, split: Split| -> [String; 3] {
        match rows.iter().find(|r| r.variant == v && r.split == split) {
            Some(r) => [r.accuracy, r.macro_precision, r.macro_recall].map(|x| format!("{x:.2}")),
            None => ["-", "-", "-"].map(String::from),
        }
    };
    let mut out = String::new();
    out.push_str(&format!("| {:width$} | {:^22} | {:^22} |\n", "", "Validation", "Test"));
    out.push_str(&format!(
        "| {:width$} | {:>6} {:>6} {:>6}   | {:>6} {:>6} {:>6}   |\n",
        "Model", "Acc.", "mP", "mR", "Acc.", "mP", "mR"
    ));
    out.push_str(&format!("|{}|{}|{}|\n", "-".repeat(width + 2), "-".repeat(24), "-".repeat(24)));
    for v in variants {
        let [va, vp, vr] = cell(v, Split::Validation);
        let [ta, tp, tr] = cell(v, Split::Test);
        out.push_str(&format!(
            "| {v:width$} | {va:>6} {vp:>6} {vr:>6}   | {ta:>6} {tp:>6} {tr:>6}   |\n"
        ));
    }
    out
}
