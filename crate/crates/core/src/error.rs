use std::io;
use std::path::Path;

use thiserror::Error;

/// Errors produced by the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input in case `{case}`: {reason}")]
    Degenerate { case: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("array file format error: {0}")]
    Format(String),

    #[error("truncated array file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error: 2 validation, 3 IO, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 3,
            Error::Numeric(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    /// Name of the pipeline stage that failed, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Prefixes IO errors with the path they concern.
    pub fn at(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
        move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
