//! Error type shared across the crate.
//!
//! Errors fall into three categories that the command-line front end maps to
//! distinct exit codes: input/parse problems and invariant violations are
//! *data* errors, failures of the numerical routines (non-convergence, rank
//! deficiency discovered mid-solve, infeasible calibration) are *numerical*
//! errors, and I/O failures are reported with the offending path.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem problem; carries the path for context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input that never became a dataset: CSV syntax, formula
    /// syntax, config syntax. Location is included in the message.
    #[error("parse error: {0}")]
    Parse(String),

    /// Structurally valid input that violates a documented invariant
    /// (non-monotone dropout, ordinal coding, missing fields, unknown
    /// columns, incompatible shapes).
    #[error("{0}")]
    Validation(String),

    /// A numerical routine failed: rank deficiency, non-convergence,
    /// degenerate variance, infeasible calibration.
    #[error("{0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Stable machine-readable category name, used by the CLI error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Parse(_) | Error::Validation(_) => "data",
            Error::Numerical(_) => "numerical",
        }
    }
}
