//! Library side of the `didimp` command-line tool: configuration, reports
//! and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod report;

use didimp_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("nothing to plot: no effect estimates and no pre-trend coefficients")]
    NothingToPlot,

    #[error("cannot read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config(_) => "cli.invalid_config",
            CliError::NothingToPlot => "cli.nothing_to_plot",
            CliError::Io { .. } => "cli.io",
            CliError::Json(_) => "cli.json",
        }
    }

    /// 2 for statistical non-identification, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_identification_failure() => 2,
            _ => 1,
        }
    }

    /// Unmatched model directions when the failure is non-identification.
    pub fn certificate(&self) -> Option<&[String]> {
        match self {
            CliError::Core(CoreError::NotIdentified { certificate }) => Some(certificate),
            _ => None,
        }
    }
}
