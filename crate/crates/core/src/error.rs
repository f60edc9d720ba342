use thiserror::Error;

pub type Result<T> = std::result::Result<T, MapleError>;

#[derive(Debug, Error)]
pub enum MapleError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("target column {0:?} not found")]
    MissingTarget(String),

    #[error("duplicate header {0:?}")]
    DuplicateHeader(String),

    #[error("feature column {column:?} has zero variance on the training split")]
    ZeroVariance { column: String },

    #[error("singular weighted least-squares system (increase ridge)")]
    Singular,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient rows: need at least {needed}, have {have}")]
    InsufficientRows { needed: usize, have: usize },
}

impl MapleError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MapleError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MapleError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
