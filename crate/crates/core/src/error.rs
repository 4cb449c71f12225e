use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. The CLI maps each variant to exactly
/// one exit code through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("singular metric at coordinate {coord} (value {value})")]
    Singularity { coord: usize, value: f64 },

    #[error("non-finite value in {context} at coordinate {coord}")]
    NonFinite { context: String, coord: usize },

    #[error("chain diverged at step {step} with eta={eta}")]
    Divergence {
        step: u64,
        eta: f64,
        last_finite: Vec<f64>,
    },

    #[error("chains {failed:?} diverged: {first}")]
    PartialFailure { failed: Vec<usize>, first: Box<Error> },

    #[error("compatibility error: integral of rhs against nu is {integral:e} (tolerance {tol:e})")]
    Compatibility { integral: f64, tol: f64 },

    #[error("solver error: {message} (condition estimate {condition:e})")]
    Solver { message: String, condition: f64 },

    #[error("domain too small: boundary-shell mass fraction {mass:e}; suggested bounds {suggested:?}")]
    DomainTooSmall { mass: f64, suggested: Vec<(f64, f64)> },

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration and usage problems, 3 for numerical failures,
    /// 4 for input/output and data ingestion.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Dimension { .. } | Error::Config { .. } => 2,
            Error::Singularity { .. }
            | Error::NonFinite { .. }
            | Error::Divergence { .. }
            | Error::PartialFailure { .. }
            | Error::Compatibility { .. }
            | Error::Solver { .. }
            | Error::DomainTooSmall { .. } => 3,
            Error::Ingestion { .. } | Error::Format(_) | Error::EmptyDataset | Error::Io { .. } => 4,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::Dimension { expected, got })
    } else {
        Ok(())
    }
}
