//! The MIL training engine.
//!
//! Each bag is reduced to its key instance: the instance with the highest
//! positive-class probability under the current parameters. Only that
//! instance contributes to the bag's loss and gradient, with the bag label as
//! target. Because a negative bag holds only negative instances, its key
//! instance is always a correctly targeted negative example.

mod accumulate;
mod bag;
mod convergence;
mod select;
mod train;

pub use accumulate::GradAccumulator;
pub use bag::{Bag, Label};
pub use convergence::ConvergenceMonitor;
pub use select::{bag_gradient, bag_loss, select_key_instance, validation_loss, BagGradient, KeyInstance};
pub use train::{
    train_step, train_until_convergence, train_with_observer, EpochRecord, StepStats, StopReason,
    TrainConfig, TrainOutcome, TrainingLog,
};
