//! Command-line harness for the distillation trainer: corpus generation,
//! training, evaluation and lambda sweeps, with all persistence formats
//! (corpus, metrics, checkpoints, reports) owned here.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod split;

pub use config::{resolve_config, Overrides, RunConfig};
pub use error::{CliError, Result};
