use std::fmt;

/// Primitive operations known to the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Sum,
    Transpose,
    LayerNorm,
    EmbeddingLookup,
    Softmax,
    Gelu,
    ScaledDotAttention,
    CrossEntropy,
    GateMix,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Transpose => "transpose",
            OpKind::LayerNorm => "layernorm",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::ScaledDotAttention => "scaled_dot_attention",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::GateMix => "gate_mix",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: OpKind, detail: String },
    #[error("{op}: non-finite value in input {input}")]
    NonFinite { op: OpKind, input: usize },
    #[error("{op}: index {index} out of range (limit {limit}) at position {position}")]
    IndexOutOfRange {
        op: OpKind,
        index: usize,
        limit: usize,
        position: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("optimizer state does not match parameter set: {0}")]
    StateMismatch(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
