//! Library side of the `seqlab` command-line tool: configuration layering,
//! checkpoints, ribbon plots and the subcommand implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod render;

use thiserror::Error;

/// Failure classes, each with its own process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("gate failed: {0}")]
    Gate(String),
    #[error("aborted: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Gate(_) => 4,
            CliError::Runtime(_) => 5,
        }
    }

    /// Classifies a library error raised while reading or preparing data.
    pub fn data(e: seqlab::Error) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}
