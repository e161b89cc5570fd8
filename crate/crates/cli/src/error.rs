//! Error classification for the exit-code contract.
//!
//! 0 success, 1 completed with warnings (non-convergence), 2 input error,
//! 3 internal error.

use std::path::Path;

/// A failure that terminates the run.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or missing user input: files, config values, malformed rows.
    #[error("{0}")]
    Input(String),
    /// A failure that is not the user's fault (numerical breakdown,
    /// filesystem trouble while writing outputs).
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn input(msg: impl std::fmt::Display) -> Self {
        CliError::Input(msg.to_string())
    }

    pub fn internal(msg: impl std::fmt::Display) -> Self {
        CliError::Internal(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<stareal_core::Error> for CliError {
    fn from(err: stareal_core::Error) -> Self {
        match err {
            // Numerical breakdowns are not input problems; everything else
            // traces back to the supplied data or configuration.
            stareal_core::Error::Numerical(_) => CliError::Internal(err.to_string()),
            _ => CliError::Input(err.to_string()),
        }
    }
}

/// Attach a file path to an IO error (input side).
pub fn io_input(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {err}", path.display()))
}

/// Attach a file path to an IO error (output side).
pub fn io_internal(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{}: {err}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;

/// Outcome of a successfully completed command.
#[derive(Debug, Clone, Default)]
pub struct RunStatus {
    /// Messages that downgrade the exit code to 1 (e.g. chains that did
    /// not converge). Empty means a clean run.
    pub warnings: Vec<String>,
}

impl RunStatus {
    pub fn clean() -> Self {
        RunStatus::default()
    }

    pub fn merge(&mut self, other: RunStatus) {
        self.warnings.extend(other.warnings);
    }
}
