use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the backend.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: not found", .0.display())]
    NotFound(PathBuf),

    #[error("{}: line {line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("row {row}: segment `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: duplicate segment id `{id}`")]
    DuplicateSegment { row: usize, id: String },

    #[error("row {row}: no metadata row for segment `{id}`")]
    MissingMetadata { row: usize, id: String },

    #[error("row {row}: segment `{id}` contains a non-finite value")]
    NonFinite { row: usize, id: String },

    #[error("unknown segment `{0}`")]
    UnknownSegment(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("corrupt bundle: {0}")]
    Corrupt(String),

    #[error("unsupported bundle format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad inputs rather than by a numerical or
    /// I/O failure during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numeric(_) | Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
