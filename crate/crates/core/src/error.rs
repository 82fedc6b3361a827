use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants fall in three groups that the CLI maps onto exit codes:
/// caller mistakes (`Dimension`, `EmptyInput`, `Contract`, `Config`, `Spec`),
/// bad inputs (`Data`, `Parse`, `Io`, `Corrupt`, `Version`) and numerical
/// failure (`NonFinite`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt weights file: {0}")]
    Corrupt(String),

    #[error("unsupported weights format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        Error::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by the caller's configuration or arguments
    /// rather than by the data being processed.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Spec(_) | Error::Contract(_) | Error::Dimension { .. }
        )
    }
}
