use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("softmax over a fully masked slice (axis {axis}, lane {lane})")]
    DegenerateSoftmax { axis: usize, lane: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    VocabOutOfRange { id: usize, vocab_size: usize },

    #[error("operation not valid in fusion mode {mode}: {reason}")]
    ModeError { mode: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty span candidate list: no context tokens available")]
    EmptySpanList,

    #[error("no prediction possible: string score table is empty")]
    NoPrediction,

    #[error("model function is not deterministic: two evaluations differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
