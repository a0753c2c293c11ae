//! Command implementations behind the `sparsekp` binary.

pub mod commands;
pub mod config;
pub mod plot;
pub mod results;

use std::fmt;

pub use config::{DecodeConfig, Precision, RunConfig};

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; nothing was written.
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sparsekp::Error> for CliError {
    fn from(e: sparsekp::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
