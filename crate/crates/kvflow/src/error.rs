//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by cache, attention, policy, oracle, and trace code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter or construction argument.
    #[error("configuration error: {0}")]
    Config(String),

    /// Slot index outside the arena or score vector.
    #[error("index error: {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// Slot exists but does not hold a live token.
    #[error("index error: slot {0} is not valid")]
    InvalidSlot(usize),

    /// Write/eviction ordering contract violated.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Full arena asked to append without a prior eviction decision.
    #[error("protocol error: no eviction decision recorded")]
    NoEvictionDecision,

    /// Softmax over a fully masked score vector.
    #[error("empty attention support")]
    EmptySupport,

    /// Attention over an arena with no valid slots.
    #[error("empty cache")]
    EmptyCache,

    /// Removing the only token that carries attention mass.
    #[error("empty post-eviction support")]
    EmptyPostEviction,

    /// Operation on a vector with no direction.
    #[error("{0}")]
    ZeroVector(&'static str),

    /// Vector dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// Prefill larger than the cache budget with no kept-index list.
    #[error("prefill exceeds budget; compress first ({tokens} tokens, capacity {capacity})")]
    PrefillExceedsBudget { tokens: usize, capacity: usize },

    /// Compression requested although the tokens already fit.
    #[error("compression not needed: {tokens} tokens within budget {budget}")]
    CompressionNotNeeded { tokens: usize, budget: usize },

    /// Policy operation invoked on the wrong policy kind.
    #[error("policy misuse: {0}")]
    Misuse(String),

    /// Every valid slot is protected from eviction.
    #[error("no eviction candidate")]
    NoCandidate,

    /// Attention weight of 1 makes the renormalized quantities undefined.
    #[error("singularity: {0}")]
    Singularity(&'static str),

    /// Argument outside the mathematical domain of the formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed trace bytes.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Structurally readable trace with inconsistent contents.
    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
