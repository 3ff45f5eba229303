use crate::cohort::{StageIndex, TaskKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { found: String, expected: &'static str },

    #[error("patient {patient_id}: invalid `{field}`: {message}")]
    InvalidRecord { patient_id: String, field: String, message: String },

    #[error("invalid `{field}`: {message}")]
    InvalidArgument { field: String, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: usize, found: usize },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("no eligible samples for {task} at t={stage}")]
    NoSamples { task: TaskKind, stage: StageIndex },

    #[error("model unavailable: {0}")]
    ModelUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument { field: field.into(), message: message.into() }
    }
}
