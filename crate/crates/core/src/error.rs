use thiserror::Error;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite loss at step {step} (learn_rate too large?)")]
    NonFiniteLoss { step: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("singular linear system: {0}")]
    Singular(&'static str),

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("edit {index} failed: {source}")]
    EditFailed {
        index: usize,
        #[source]
        source: Box<EditError>,
    },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EditError> = std::result::Result<T, E>;
