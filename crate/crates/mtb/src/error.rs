use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("statement too long: {len} tokens exceeds max_len {max_len}")]
    StatementTooLong { len: usize, max_len: usize },

    #[error("entity spans overlap: s1=({0}, {1}), s2=({2}, {3})")]
    SpanOverlap(usize, usize, usize, usize),

    #[error("numeric overflow: non-finite value in {0}")]
    NumericOverflow(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no positive pairs available: no entity pair occurs twice")]
    NoPositivePairs,

    #[error("insufficient examples for relation type {relation:?}: have {have}, need {need}")]
    InsufficientExamples {
        relation: String,
        have: usize,
        need: usize,
    },

    #[error("insufficient relation types: have {have}, need {need}")]
    InsufficientTypes { have: usize, need: usize },

    #[error("unknown relation label {0:?}")]
    UnknownLabel(String),

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("unsupported {format} version {got} (expected {want})")]
    Version {
        format: String,
        got: u32,
        want: u32,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at step {step}")]
    NanLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
