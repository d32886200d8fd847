use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};

/// Upper bounds accepted when reading untrusted configs.
const MAX_LAYERS: usize = 256;
const MAX_HIDDEN: usize = 16_384;
const MAX_VOCAB: usize = 1 << 20;
const MAX_CONTEXT: usize = 1 << 16;

/// Decoder-only transformer shape plus the freeze depth used when training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Leading transformer layers (plus the embeddings) held fixed during training.
    pub freeze_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 128,
            n_heads: 4,
            vocab_size: 128,
            context_length: 128,
            freeze_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoopError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_layers > MAX_LAYERS {
            return bad(format!("n_layers {} outside 1..={MAX_LAYERS}", self.n_layers));
        }
        if self.hidden_dim == 0 || self.hidden_dim > MAX_HIDDEN {
            return bad(format!("hidden_dim {} outside 1..={MAX_HIDDEN}", self.hidden_dim));
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "n_heads {} must divide hidden_dim {}",
                self.n_heads, self.hidden_dim
            ));
        }
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return bad(format!("vocab_size {} outside 1..={MAX_VOCAB}", self.vocab_size));
        }
        if self.context_length < 2 || self.context_length > MAX_CONTEXT {
            return bad(format!("context_length {} outside 2..={MAX_CONTEXT}", self.context_length));
        }
        if self.freeze_depth > self.n_layers {
            return bad(format!(
                "freeze_depth {} exceeds n_layers {}",
                self.freeze_depth, self.n_layers
            ));
        }
        Ok(())
    }

    pub fn with_freeze_depth(mut self, k: usize) -> Self {
        self.freeze_depth = k;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Closed-form parameter count; matches the serialized array lengths.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let per_layer = 12 * d * d + 13 * d;
        self.vocab_size * d          // token embedding
            + self.context_length * d // positions
            + self.n_layers * per_layer
            + 2 * d                   // final norm
            + d * self.vocab_size // unembedding
    }
}
