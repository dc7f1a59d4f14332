//! Batch front end of the gist fine-tuning lab: experiment configs,
//! pretraining, fine-tuning sweeps, ablation grids, the gradient-check
//! suite and attention export.

pub mod ablate;
pub mod config;
mod error;
pub mod export;
pub mod gradcheck;
pub mod report;
pub mod run;

pub use error::{CliError, CliResult};
