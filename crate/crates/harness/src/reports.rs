//! CSV files written and read by the harness.

use std::path::Path;

use mil_core::metrics::{EvalReport, PrPoint};
use mil_core::mil::EpochRecord;
use mil_core::Bag;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.csv";
pub const PR_CURVE: &str = "pr_curve.csv";
pub const SCORES: &str = "scores.csv";
pub const SWEEP_CELLS: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";
pub const SWEEP_PR: &str = "sweep_pr.csv";

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| HarnessError::csv(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Writes a header-only file when `rows` is empty, which `write_rows` cannot.
pub fn write_rows_with_header<T: Serialize>(path: impl AsRef<Path>, header: &[&str], rows: &[T]) -> Result<()> {
    if !rows.is_empty() {
        return write_rows(path, rows);
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    w.write_record(header).map_err(|e| HarnessError::csv(path, e))?;
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_rows<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::csv(path, e))
}

pub fn log_rows(epochs: &[EpochRecord], wall_clock: bool) -> Vec<EpochRecord> {
    epochs
        .iter()
        .map(|r| EpochRecord {
            wall_seconds: if wall_clock { r.wall_seconds } else { 0.0 },
            ..r.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummaryRow {
    pub fold: usize,
    pub threshold: f64,
    pub bags: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub average_precision: f64,
}

impl EvalSummaryRow {
    pub fn from_report(r: &EvalReport) -> Self {
        let c = &r.confusion;
        Self {
            fold: r.fold_id,
            threshold: r.threshold,
            bags: c.total(),
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            tpr: c.tpr(),
            tnr: c.tnr(),
            accuracy: c.accuracy(),
            precision: c.precision(),
            average_precision: r.average_precision,
        }
    }
}

/// One PR-curve point; `size` is present only for sweep curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    pub fold: usize,
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

impl PrRow {
    pub fn rows(size: Option<usize>, fold: usize, points: &[PrPoint]) -> Vec<Self> {
        points
            .iter()
            .map(|p| PrRow {
                size,
                fold,
                threshold: p.threshold,
                recall: p.recall,
                precision: p.precision,
            })
            .collect()
    }

    pub fn point(&self) -> PrPoint {
        PrPoint {
            threshold: self.threshold,
            recall: self.recall,
            precision: self.precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub bag_id: String,
    pub label: u8,
    pub score: f64,
}

pub fn score_rows(bags: &[Bag], report: &EvalReport) -> Vec<ScoreRow> {
    bags.iter()
        .zip(&report.scores)
        .map(|(b, &score)| ScoreRow {
            bag_id: b.id.clone(),
            label: b.label as u8,
            score,
        })
        .collect()
}

/// Writes the summary, PR-curve and per-bag score files of one evaluation.
pub fn write_eval(dir: &Path, bags: &[Bag], report: &EvalReport) -> Result<()> {
    write_rows(dir.join(EVAL_SUMMARY), &[EvalSummaryRow::from_report(report)])?;
    write_rows(dir.join(PR_CURVE), &PrRow::rows(None, report.fold_id, &report.pr_points))?;
    write_rows(dir.join(SCORES), &score_rows(bags, report))
}
