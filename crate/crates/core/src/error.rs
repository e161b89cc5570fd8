use alloc::string::String;

/// Crate-wide error type.
///
/// Most constructors and fitting routines validate their inputs up front and
/// return one of these variants instead of panicking; numerical failures that
/// can be repaired internally (e.g. a non-positive-definite proposal
/// covariance during MCMC adaptation) are handled in place and never surface
/// here.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A precondition on the inputs was violated (wrong length, duplicate or
    /// unknown identifier, out-of-range value, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The requested statistic is not defined for the given data, e.g.
    /// Moran's I of a constant vector.
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// A linear system could not be solved because the matrix is singular
    /// (or not positive definite). The message names the offending column or
    /// matrix where that can be determined.
    #[error("singular system: {0}")]
    Singular(String),

    /// An iterative routine failed in a way that cannot be reported as a
    /// plain non-convergence flag (e.g. the objective became non-finite).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl core::fmt::Display) -> Self {
        Error::InvalidInput(alloc::format!("{msg}"))
    }

    pub(crate) fn undefined(msg: impl core::fmt::Display) -> Self {
        Error::UndefinedStatistic(alloc::format!("{msg}"))
    }

    pub(crate) fn singular(msg: impl core::fmt::Display) -> Self {
        Error::Singular(alloc::format!("{msg}"))
    }

    pub(crate) fn numerical(msg: impl core::fmt::Display) -> Self {
        Error::Numerical(alloc::format!("{msg}"))
    }
}
