use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("array `{name}` is missing ({path})")]
    MissingArray { name: String, path: PathBuf },

    #[error("shape mismatch for `{what}`: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("support mask {0} has no foreground pixel")]
    EmptyMask(usize),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("zero-norm vector: {0}")]
    ZeroVector(&'static str),

    #[error("value out of range: {0}")]
    BadRange(String),

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("invalid value in `{name}`: {reason}")]
    InvalidValue { name: String, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short name used in batch summaries.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingArray { .. } => "MissingArray",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::EmptyMask(_) => "EmptyMask",
            Error::DimMismatch(_) => "DimMismatch",
            Error::ZeroVector(_) => "ZeroVector",
            Error::BadRange(_) => "BadRange",
            Error::DegenerateMatrix(_) => "DegenerateMatrix",
            Error::InvalidValue { .. } => "InvalidValue",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Manifest { .. } => "Manifest",
            Error::IoFailure { .. } => "IoFailure",
        }
    }

    pub(crate) fn shape(
        what: impl Into<String>,
        expected: impl std::fmt::Debug,
        found: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
