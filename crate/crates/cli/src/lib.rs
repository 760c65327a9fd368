//! Library side of the `crowdwm` binary: configuration, the subcommands and
//! plot-data export.

pub mod commands;
pub mod config;
pub mod plots;

use thiserror::Error;

pub use config::{Loaded, Overrides, RunConfig};

/// Format version written into plot files and rollout dumps.
pub const EXPORT_FORMAT: &str = "1";

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing or malformed input: config, scene file, dataset, episode.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Checkpoint(String),
    /// Checkpoint and dataset disagree (camera rig).
    #[error("{0}")]
    Compatibility(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Compatibility(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}
