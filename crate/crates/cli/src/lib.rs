//! Library side of the experiment driver: configuration, artifact
//! layout, and the pipeline stages behind each CLI subcommand.

pub mod config;
pub mod stages;

use std::fmt;
use std::path::PathBuf;

/// Errors surfaced by the driver, each mapped to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; names the offending field path. Exit 2.
    Config { path: String, message: String },
    /// A required upstream artifact is missing. Exit 3.
    MissingArtifact { path: PathBuf },
    /// A produced artifact violates an invariant. Exit 4.
    Invariant { message: String },
    /// Anything else. Exit 1.
    Core(uaplab_core::Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Invariant { .. } => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { path, message } => write!(f, "config error at {path}: {message}"),
            CliError::MissingArtifact { path } => {
                write!(f, "missing artifact: {} (run the upstream stage first)", path.display())
            }
            CliError::Invariant { message } => write!(f, "invariant violation: {message}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<uaplab_core::Error> for CliError {
    fn from(e: uaplab_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(uaplab_core::Error::Json(e))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
