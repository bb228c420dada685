use thiserror::Error;

#[derive(Error, Debug)]
pub enum MelodiError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("invalid config: field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MelodiError>;
