//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the model, scheduler, training, and harness code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Two tensors or vectors disagree on a dimension.
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A token position would exceed the model's positional table.
    #[error("position {position} exceeds max_seq_len {max_seq_len}")]
    PositionOverflow { position: usize, max_seq_len: usize },

    /// A token id is outside the vocabulary.
    #[error("token {token} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    /// Every logit was negative infinity (or NaN), so nothing can be sampled.
    #[error("no finite logits to sample from")]
    NoFiniteLogits,

    /// Knee detection needs a minimum number of curve points.
    #[error("need at least {needed} curve points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    /// The selected node set is not closed under taking parents.
    #[error("selected set is not ancestor-closed at node {0}")]
    ClosureViolation(usize),

    /// Advantage standardization needs at least two responses per group.
    #[error("group size {0} is too small for standardization (need >= 2)")]
    GroupTooSmall(usize),

    /// Prompt is empty or too long for the model.
    #[error("bad prompt: {0}")]
    BadPrompt(String),

    /// An accounting log was empty.
    #[error("empty log: {0}")]
    EmptyLog(&'static str),

    /// Speedup ratio with a zero-time candidate.
    #[error("candidate run has zero {0} time")]
    ZeroTime(&'static str),

    /// Unknown bench strategy name.
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    /// Strategies that must agree token-for-token produced different outputs.
    #[error("token streams diverged: {0}")]
    Divergence(String),

    /// A checkpoint file is malformed.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
