//! Canonical order and shapes of the weight arrays.
//!
//! ```text
//! 0               tok_emb            [vocab, d]
//! 1               pos_emb            [context, d]
//! 2 + 16·l + s    layers.{l}.<slot>  (slots below)
//! 2 + 16·L        ln_f.gain          [d]
//! 3 + 16·L        ln_f.bias          [d]
//! 4 + 16·L        unembed            [d, vocab]
//! ```

use super::ModelConfig;

pub const TOK_EMB: usize = 0;
pub const POS_EMB: usize = 1;
pub const PER_LAYER: usize = 16;

pub const LN1_GAIN: usize = 0;
pub const LN1_BIAS: usize = 1;
pub const WQ: usize = 2;
pub const BQ: usize = 3;
pub const WK: usize = 4;
pub const BK: usize = 5;
pub const WV: usize = 6;
pub const BV: usize = 7;
pub const WO: usize = 8;
pub const BO: usize = 9;
pub const LN2_GAIN: usize = 10;
pub const LN2_BIAS: usize = 11;
pub const W1: usize = 12;
pub const B1: usize = 13;
pub const W2: usize = 14;
pub const B2: usize = 15;

const SLOT_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

pub fn layer(l: usize, slot: usize) -> usize {
    2 + l * PER_LAYER + slot
}

pub fn ln_f_gain(cfg: &ModelConfig) -> usize {
    2 + cfg.n_layers * PER_LAYER
}

pub fn ln_f_bias(cfg: &ModelConfig) -> usize {
    3 + cfg.n_layers * PER_LAYER
}

pub fn unembed(cfg: &ModelConfig) -> usize {
    4 + cfg.n_layers * PER_LAYER
}

pub fn array_count(cfg: &ModelConfig) -> usize {
    5 + cfg.n_layers * PER_LAYER
}

/// Which transformer layer an array belongs to, if any.
pub fn layer_of(index: usize, cfg: &ModelConfig) -> Option<usize> {
    (2..ln_f_gain(cfg)).contains(&index).then(|| (index - 2) / PER_LAYER)
}

fn slot_shape(slot: usize, d: usize) -> Vec<usize> {
    match slot {
        WQ | WK | WV | WO => vec![d, d],
        W1 => vec![d, 4 * d],
        B1 => vec![4 * d],
        W2 => vec![4 * d, d],
        _ => vec![d],
    }
}

/// `(name, shape)` for every array, in serialization order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut out = Vec::with_capacity(array_count(cfg));
    out.push(("tok_emb".to_string(), vec![cfg.vocab_size, d]));
    out.push(("pos_emb".to_string(), vec![cfg.context_length, d]));
    for l in 0..cfg.n_layers {
        for (slot, name) in SLOT_NAMES.iter().enumerate() {
            out.push((format!("layers.{l}.{name}"), slot_shape(slot, d)));
        }
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, cfg.vocab_size]));
    out
}

pub fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

/// Output projections feeding the residual stream get a depth-scaled init.
pub fn is_residual_out(name: &str) -> bool {
    name.ends_with("attn.wo") || name.ends_with("mlp.w2")
}
