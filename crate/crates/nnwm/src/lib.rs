//! File formats, experiment configuration and the `nnwm` command line on top
//! of `nnwm-core`.

pub mod checkpoint;
pub mod cifar;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod report;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
