//! Command-line orchestration around `mil-core`: dataset files, training runs,
//! evaluation reports, dataset-size sweeps and their figures.

pub mod commands;
pub mod config;
pub mod error;
pub mod modelfile;
pub mod plot;
pub mod reports;
pub mod sweep;
