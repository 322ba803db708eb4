use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{MilError, Result};
use crate::model::ModelParams;

use super::accumulate::GradAccumulator;
use super::bag::{Bag, Label};
use super::convergence::ConvergenceMonitor;
use super::select::{bag_gradient, validation_loss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub min_delta: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 128,
            min_delta: 1e-4,
            patience: 50,
            max_epochs: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(MilError::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(MilError::Config("min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-bag statistics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub losses: Vec<f64>,
    pub key_indices: Vec<usize>,
}

/// One batch: key-instance gradient per bag, running-mean accumulation, one Adam step.
///
/// `batch` may be shorter than the accumulator's batch size (final batch of
/// an epoch). On any numeric failure nothing is applied and the accumulator
/// is cleared.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    acc: &mut GradAccumulator,
    batch: &[&Bag],
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(MilError::Empty("training batch"));
    }
    if batch.len() > acc.batch_size() {
        return Err(MilError::AccumulatorFull(acc.batch_size()));
    }
    acc.reset();
    let mut stats = StepStats {
        losses: Vec::with_capacity(batch.len()),
        key_indices: Vec::with_capacity(batch.len()),
    };
    for bag in batch {
        let step = bag_gradient(params, bag).and_then(|g| {
            acc.accumulate(&g.grads)?;
            Ok(g)
        });
        match step {
            Ok(g) => {
                stats.losses.push(g.loss);
                stats.key_indices.push(g.key_index);
            }
            Err(e) => {
                acc.reset();
                return Err(e);
            }
        }
    }
    acc.apply(opt, params)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_loss: f64,
    pub epochs_since_improvement: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Validation loss stopped improving for `patience` epochs.
    Converged,
    /// The hard epoch cap was reached first.
    EpochCap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub optimizer_steps: u64,
    pub log: TrainingLog,
}

/// Trains from `init` until the validation loss stops improving.
pub fn train_until_convergence(
    init: ModelParams,
    train: &[Bag],
    val: &[Bag],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with_observer(init, train, val, config, seed, |_| {})
}

/// As [`train_until_convergence`], calling `observer` after every epoch.
pub fn train_with_observer(
    init: ModelParams,
    train: &[Bag],
    val: &[Bag],
    config: &TrainConfig,
    seed: u64,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(MilError::Empty("training set"));
    }
    if val.is_empty() {
        return Err(MilError::Empty("validation set"));
    }
    let mut log = TrainingLog::default();
    let positives = train.iter().filter(|b| b.label == Label::Positive).count();
    if positives * 2 != train.len() {
        log.warnings.push(format!(
            "training set is not class-balanced: {positives} positive of {}",
            train.len()
        ));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init;
    let mut opt = AdamState::new(config.adam, &params)?;
    let mut acc = GradAccumulator::new(&params, config.batch_size)?;
    let mut monitor = ConvergenceMonitor::new(config.min_delta, config.patience);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::EpochCap;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Bag> = chunk.iter().map(|&i| &train[i]).collect();
            let stats = train_step(&mut params, &mut opt, &mut acc, &batch)
                .map_err(|e| MilError::Numeric(format!("epoch {epoch}: {e}")))?;
            loss_sum += stats.losses.iter().sum::<f64>();
        }
        let val_loss = validation_loss(&params, val)?;
        if monitor.update(val_loss) {
            best = params.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            mean_train_loss: loss_sum / train.len() as f64,
            val_loss,
            epochs_since_improvement: monitor.epochs_since_improvement(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record);
        log.epochs.push(record);
        if monitor.should_stop() {
            stop = StopReason::Converged;
            break;
        }
    }
    if stop == StopReason::EpochCap {
        log.warnings.push(format!(
            "no convergence within {} epochs; returning best epoch {best_epoch}",
            config.max_epochs
        ));
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        best_val_loss: monitor.best_val_loss(),
        stop,
        optimizer_steps: opt.step_count(),
        log,
    })
}
