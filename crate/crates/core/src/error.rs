use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unknown request type `{label}`; known types: {}", known.join(", "))]
    UnknownType { label: String, known: Vec<String> },
    #[error("insufficient history: anchor day {anchor} needs {window} prior days")]
    InsufficientHistory { anchor: i64, window: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not positive definite (try a larger noise term alpha)")]
    NotPositiveDefinite,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("llm client error: {0}")]
    Llm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
