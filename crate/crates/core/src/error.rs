//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced while loading data, tuning kernels, or solving for weights.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data is structurally invalid (shape mismatch, bad treatment
    /// coding, non-finite values, too-few units in an arm, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// CSV file could not be read or parsed.
    #[error("csv error: {0}")]
    Csv(String),

    /// A matrix that must be symmetric positive semi-definite failed the
    /// check beyond the allowed tolerance.
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),

    /// A numeric routine failed to converge within its iteration budget.
    #[error("did not converge: {0}")]
    NoConvergence(String),

    /// A numeric routine produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Invalid configuration or argument value.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
