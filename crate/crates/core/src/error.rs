use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong rank or extent along some axis.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: String, detail: String },

    /// A value outside the mathematical domain of an operation (negative sqrt,
    /// non-finite logits, nonpositive VHS score, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: String, detail: String },

    /// An operation was invoked in the wrong state, e.g. backward after an
    /// eval-mode forward.
    #[error("state error: {0}")]
    State(String),

    /// Parameters, gradients, and optimizer moments do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("non-finite loss at epoch {epoch}, {location}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        location: String,
        value: f64,
    },

    #[error("checkpoint format error: {0}")]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"CDNT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnknownVersion(u32),
    #[error("truncated file: needed {needed} bytes for {what}, {available} available")]
    Truncated {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
}

impl Error {
    pub(crate) fn dim(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Domain {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by how the program was invoked rather than by a failure
    /// while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_))
    }
}
