//! File formats, experiment configs, ablation suites and the `bind`
//! command line, layered over the `bind-core` engine.

pub mod ablation;
pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{BindError, Result};
