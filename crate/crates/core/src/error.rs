use thiserror::Error;

use crate::TaskId;

pub type Result<T, E = GradexError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GradexError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyData(&'static str),

    #[error("unknown task id {0}")]
    UnknownTask(TaskId),

    #[error("task {0} is not covered by any scored subset")]
    UncoveredTask(TaskId),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(&'static str),

    #[error("true value at index {0} is zero; relative error undefined")]
    ZeroTrueValue(usize),

    #[error("both classes must be present (clean and noisy)")]
    SingleClass,

    #[error("malformed {kind}: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("evaluation of subset {subset:?} failed: {source}")]
    Evaluation {
        subset: Vec<TaskId>,
        #[source]
        source: Box<GradexError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GradexError {
    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        GradexError::Format {
            kind,
            msg: msg.into(),
        }
    }
}
