use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("keyframe times must be strictly increasing")]
    UnsortedTimes,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("no foreground pixels to reconstruct from")]
    NoForeground,

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("dense system too large: {voxels} voxels exceeds the limit of {limit}")]
    TooLarge { voxels: usize, limit: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DtypeMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("header field `{field}` does not match payload in {path}")]
    HeaderMismatch { path: String, field: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonPositiveScale(_) => "non_positive_scale",
            Error::Degenerate(_) => "degenerate",
            Error::UnsortedTimes => "unsorted_times",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::NoForeground => "no_foreground",
            Error::Diverged(_) => "diverged",
            Error::TooLarge { .. } => "too_large",
            Error::Empty(_) => "empty",
            Error::MalformedHeader { .. } => "malformed_header",
            Error::Truncated { .. } => "truncated_payload",
            Error::DtypeMismatch { .. } => "dtype_mismatch",
            Error::HeaderMismatch { .. } => "header_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
