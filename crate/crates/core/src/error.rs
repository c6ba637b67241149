//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the op's contract.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op received or produced a NaN/Inf value.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// Backward called on a non-scalar root.
    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// Backward called twice on the same graph without reset.
    #[error("backward: gradients already computed for this graph")]
    DoubleBackward,

    /// A node id does not belong to this graph.
    #[error("graph: node {id} is detached or out of range")]
    DetachedNode { id: usize },

    /// Gradient-check program changed its output between two evaluations.
    #[error("grad_check: program is not deterministic ({first} vs {second})")]
    NondeterministicProgram { first: f64, second: f64 },

    /// Precondition failure described by the message.
    #[error("{0}")]
    InvalidArgument(String),

    /// A dataset split required by the operation is empty.
    #[error("{op}: split {split:?} is empty")]
    EmptySplit { op: &'static str, split: String },

    /// Training diverged.
    #[error("train: loss became NaN at step {step}")]
    NanLoss { step: usize },

    /// Attack gradient diverged.
    #[error("attack: gradient became NaN at batch {batch}")]
    NanGradient { batch: usize },

    /// Serialized stream does not start with the expected magic.
    #[error("{format}: bad magic (expected {expected:?}, found {found:?})")]
    BadMagic {
        format: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    /// Serialized stream has an unsupported version.
    #[error("{format}: unsupported version {found} (expected {expected})")]
    BadVersion {
        format: &'static str,
        expected: u32,
        found: u32,
    },

    /// Tensor table in a weight stream disagrees with the declared architecture.
    #[error("weights: shape table mismatch: {0}")]
    ShapeTableMismatch(String),

    /// Stream ended before the declared payload was read.
    #[error("{format}: truncated stream (needed {needed} more bytes)")]
    Truncated { format: &'static str, needed: usize },

    /// Shape-bias score is undefined: no prediction hit either cue.
    #[error("shape_bias_score: no cue-aligned predictions")]
    NoCueAlignedPredictions,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
