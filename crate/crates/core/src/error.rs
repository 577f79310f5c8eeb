use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("no valid supervision entries for this task in the batch")]
    EmptySupervision,

    #[error("missing supervision: {0}")]
    Supervision(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {losses}")]
    NonFinite { epoch: usize, step: usize, losses: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
