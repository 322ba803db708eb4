//! Dataset-size sweep.
//!
//! Training and validation bags are pooled and split into stratified folds.
//! In fold `f` the held-out part is the validation set and training subsets
//! are prefixes of a per-class shuffle of the rest, so a smaller subset is
//! always contained in a larger one. Every cell starts from the same initial
//! weights and is scored on the same test bags.

use std::time::Instant;

use mil_core::metrics::{evaluate, kfold_split, EvalReport, PrPoint};
use mil_core::mil::{train_until_convergence, StopReason};
use mil_core::model::init_params;
use mil_core::synth::volume_seed;
use mil_core::{Bag, Label, ModelParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stream};
use crate::error::{HarnessError, Result};

/// Result of training and testing one `(size, fold)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub size: usize,
    pub fold: usize,
    pub status: CellStatus,
    pub average_precision: Option<f64>,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    pub tn: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
    pub epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub converged: Option<bool>,
    pub wall_seconds: f64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub size: usize,
    pub folds_ok: usize,
    pub mean_ap: Option<f64>,
    pub median_ap: Option<f64>,
    pub min_ap: Option<f64>,
    pub max_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// One record per `(size, fold)`, sizes in configured order.
    pub cells: Vec<CellRecord>,
    /// Test-set PR curves of the successful cells, as `(size, fold, points)`.
    pub curves: Vec<(usize, usize, Vec<PrPoint>)>,
    pub summary: Vec<SizeSummary>,
}

/// Bag indices of every fold: `(held-out validation, nested training order)`.
///
/// The training order lists positives and negatives alternately, so any
/// prefix of length `n` holds `ceil(n / 2)` positives and `n / 2` negatives.
pub fn fold_plan(labels: &[Label], folds: usize, fold_seed: u64, subset_seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let splits = kfold_split(labels, folds, fold_seed)?;
    Ok(splits
        .into_iter()
        .enumerate()
        .map(|(f, fold)| {
            let mut rng = ChaCha8Rng::seed_from_u64(volume_seed(subset_seed, f as u64));
            let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
                fold.train.iter().partition(|&&i| labels[i].is_positive());
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let mut order = Vec::with_capacity(pos.len() + neg.len());
            let (mut p, mut n) = (pos.into_iter(), neg.into_iter());
            loop {
                match (p.next(), n.next()) {
                    (None, None) => break,
                    (a, b) => order.extend(a.into_iter().chain(b)),
                }
            }
            (fold.test, order)
        })
        .collect())
}

/// Largest subset size for which every fold stays class-balanced.
fn balanced_capacity(labels: &[Label], order: &[usize]) -> usize {
    let pos = order.iter().filter(|&&i| labels[i].is_positive()).count();
    let neg = order.len() - pos;
    (2 * pos.min(neg) + usize::from(pos > neg)).min(order.len())
}

pub fn run_sweep(config: &RunConfig, dev: &[Bag], test: &[Bag]) -> Result<SweepResult> {
    run_sweep_with(config, dev, test, |_| {})
}

/// As [`run_sweep`], calling `progress` as each cell finishes.
pub fn run_sweep_with(
    config: &RunConfig,
    dev: &[Bag],
    test: &[Bag],
    progress: impl Fn(&CellRecord) + Sync,
) -> Result<SweepResult> {
    config.validate()?;
    if test.is_empty() {
        return Err(HarnessError::Data("sweep needs test bags".into()));
    }
    let labels: Vec<Label> = dev.iter().map(|b| b.label).collect();
    let plan = fold_plan(
        &labels,
        config.eval.folds,
        config.stream_seed(Stream::Folds),
        config.stream_seed(Stream::Subsets),
    )?;
    let capacity = plan.iter().map(|(_, order)| balanced_capacity(&labels, order)).min().unwrap_or(0);
    if let Some(&n) = config.sweep.sizes.iter().find(|&&n| n > capacity) {
        return Err(HarnessError::Config(format!(
            "sweep size {n} exceeds the {capacity} class-balanced training bags available per fold"
        )));
    }
    let init = init_params(&config.arch, config.stream_seed(Stream::Init))?;

    let cells: Vec<(usize, usize)> = config
        .sweep
        .sizes
        .iter()
        .flat_map(|&n| (0..plan.len()).map(move |f| (n, f)))
        .collect();
    let outcomes: Vec<(CellRecord, Option<EvalReport>)> = cells
        .par_iter()
        .map(|&(size, fold)| {
            let (val_idx, order) = &plan[fold];
            let train: Vec<Bag> = order[..size].iter().map(|&i| dev[i].clone()).collect();
            let val: Vec<Bag> = val_idx.iter().map(|&i| dev[i].clone()).collect();
            let out = run_cell(config, &init, &train, &val, test, fold, size);
            progress(&out.0);
            out
        })
        .collect();

    let mut records = Vec::with_capacity(outcomes.len());
    let mut curves = Vec::new();
    for (record, report) in outcomes {
        if let Some(r) = report {
            curves.push((record.size, record.fold, r.pr_points));
        }
        records.push(record);
    }
    let summary = summarize(&config.sweep.sizes, &records);
    Ok(SweepResult {
        cells: records,
        curves,
        summary,
    })
}

fn run_cell(
    config: &RunConfig,
    init: &ModelParams,
    train: &[Bag],
    val: &[Bag],
    test: &[Bag],
    fold: usize,
    size: usize,
) -> (CellRecord, Option<EvalReport>) {
    let start = Instant::now();
    let seed = volume_seed(config.stream_seed(Stream::Shuffle), fold as u64);
    let result = train_until_convergence(init.clone(), train, val, &config.training, seed)
        .and_then(|out| Ok((evaluate(&out.params, test, config.eval.threshold, fold)?, out)));
    let wall_seconds = if config.output.wall_clock {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let mut record = CellRecord {
        size,
        fold,
        status: CellStatus::Failed,
        average_precision: None,
        tp: None,
        fp: None,
        tn: None,
        fn_: None,
        epochs: None,
        best_epoch: None,
        converged: None,
        wall_seconds,
        error: String::new(),
    };
    match result {
        Ok((report, out)) => {
            let c = report.confusion;
            record.status = CellStatus::Ok;
            record.average_precision = Some(report.average_precision);
            record.tp = Some(c.tp);
            record.fp = Some(c.fp);
            record.tn = Some(c.tn);
            record.fn_ = Some(c.fn_);
            record.epochs = Some(out.log.epochs.len());
            record.best_epoch = Some(out.best_epoch);
            record.converged = Some(out.stop == StopReason::Converged);
            (record, Some(report))
        }
        Err(e) => {
            record.error = e.to_string();
            (record, None)
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn summarize(sizes: &[usize], cells: &[CellRecord]) -> Vec<SizeSummary> {
    sizes
        .iter()
        .map(|&size| {
            let aps: Vec<f64> = cells
                .iter()
                .filter(|c| c.size == size)
                .filter_map(|c| c.average_precision)
                .collect();
            let n = aps.len();
            SizeSummary {
                size,
                folds_ok: n,
                mean_ap: (n > 0).then(|| aps.iter().sum::<f64>() / n as f64),
                median_ap: median(&aps),
                min_ap: aps.iter().copied().reduce(f64::min),
                max_ap: aps.iter().copied().reduce(f64::max),
            }
        })
        .collect()
}
