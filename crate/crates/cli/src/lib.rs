//! Experiment orchestration for the `rno` command-line tool: declarative
//! configs, the generate/train/evaluate pipeline, ablation sweeps, reports
//! and run manifests.

pub mod ablation;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
