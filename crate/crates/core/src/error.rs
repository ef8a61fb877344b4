use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("validation failed with {} breach(es): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),
    #[error("episode construction: {0}")]
    Episode(String),
    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
