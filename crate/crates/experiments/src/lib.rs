//! Experiment harness for `stochnorm`: configuration, synthetic data,
//! training runs, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod output;
pub mod rng;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{ExpError, ExpResult};
