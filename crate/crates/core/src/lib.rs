//! Multiple instance learning with max-pooling key-instance selection for
//! weakly labelled, anisotropic image volumes.
//!
//! A volume is a bag of 2D slices carrying one binary label. Training picks,
//! for every bag, the slice the current model finds most positive and
//! back-propagates only through that slice; per-bag gradients are averaged
//! over a batch before one Adam update.

pub mod adam;
pub mod autodiff;
pub mod bagio;
pub mod error;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{MilError, Result};
pub use mil::{Bag, Label};
pub use model::{ArchConfig, Gradients, ModelParams};
pub use tensor::Tensor;
