//! Error type shared by all modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Every entry of a weight or priority vector is zero, so no
    /// distribution can be formed.
    #[error("cannot normalize: all {0} entries are zero")]
    AllZero(usize),

    /// A NaN or infinity reached a numeric routine.
    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: &'static str, value: f64 },

    /// An importance weight 1/(n*p) was requested for an index with p = 0.
    #[error("zero probability at index {0}")]
    ZeroProbability(usize),

    /// Two paired vectors differ in length.
    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// An index fell outside its container.
    #[error("index {index} out of range for {context} of size {len}")]
    OutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    /// A priority must be non-negative.
    #[error("negative priority {0}")]
    NegativePriority(f64),

    /// Proportional sampling was attempted on a tree with total mass zero.
    #[error("sum tree holds no positive priority")]
    EmptyTree,

    /// Tensor or batch dimensions are inconsistent.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A batch was requested that the buffer cannot yet serve.
    #[error("insufficient data: requested {requested}, have {available}")]
    InsufficientData { requested: usize, available: usize },

    /// A selected sample carries surrogate norm zero, so the 1/surrogate
    /// correction is undefined.
    #[error("zero surrogate norm at batch position {0}")]
    ZeroSurrogate(usize),

    /// Gridworld construction placed the goal on a trap cell.
    #[error("goal cell ({0}, {1}) is also a trap")]
    GoalOnTrap(usize, usize),

    /// Exact enumeration (value iteration) was requested on a state-action
    /// space too large to enumerate.
    #[error("state-action space of size {0} exceeds enumeration limit {1}")]
    NotEnumerable(usize, usize),

    /// A probability vector violated its invariants.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// A configuration value is outside its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
