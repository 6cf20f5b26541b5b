//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI must report them: configuration and I/O
//! problems exit with code 2, malformed or mismatched artifact files with
//! code 3. Library callers can match on the variant directly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, argument, or input contract violation.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized artifact (map, dataset, model, tree, bundle) is malformed,
    /// has a bad magic/version, or disagrees with the configuration it is
    /// loaded into.
    #[error("artifact error: {0}")]
    Format(String),

    /// Numerical failure that indicates a broken input contract, e.g. a
    /// covariance that is not positive definite.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
