//! Crate-wide error type.
//!
//! Numeric contract violations (shape mismatches, non-finite values, degenerate
//! vectors) are hard errors everywhere: silently propagating a NaN through a
//! contrastive loss is undetectable after the fact.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SmarError>;

#[derive(Debug, Error)]
pub enum SmarError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({detail})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("degenerate vector: norm {norm:e} below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    VocabId { id: u32, vocab_size: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corpus spec error: {0}")]
    CorpusSpec(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown variant '{0}'")]
    UnknownVariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SmarError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SmarError::Io {
            path: path.into(),
            source,
        }
    }
}
