//! Mini-GPT: pre-norm decoder-only transformer with learned absolute positions
//! and an untied unembedding.

pub mod checkpoint;
mod config;
pub mod layout;

use coop_numerics::{rng, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CheckpointError, Digest, Provenance, WeightArray};
pub use config::ModelConfig;

use crate::error::{CoopError, Result};

pub type TokenId = u32;

const INIT_STD: f64 = 0.02;

/// Deterministic initialization from `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = rng::stream(seed, "model-init");
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let weights = layout::layout(&config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if layout::is_gain(&name) {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let scale = if layout::is_residual_out(&name) { residual_scale } else { 1.0 };
                (0..n).map(|_| normal.sample(&mut rng) * scale).collect()
            };
            WeightArray { name, shape, data }
        })
        .collect();
    let provenance = Provenance { seed, ..Provenance::default() };
    Checkpoint::assemble(config, weights, provenance)
}

/// Whether array `index` is updated during training at the config's freeze depth.
///
/// With `K > 0` the embeddings and layers `0..K` are frozen; everything from
/// layer `K` up, the final norm and the unembedding stay trainable.
pub fn is_trainable(config: &ModelConfig, index: usize) -> bool {
    let k = config.freeze_depth;
    if k == 0 {
        return true;
    }
    match index {
        layout::TOK_EMB | layout::POS_EMB => false,
        i => layout::layer_of(i, config).is_none_or(|l| l >= k),
    }
}

/// Per-array trainability, in layout order.
pub fn trainable_mask(ckpt: &Checkpoint) -> Vec<(String, bool)> {
    ckpt.weights()
        .iter()
        .enumerate()
        .map(|(i, w)| (w.name.clone(), is_trainable(ckpt.config(), i)))
        .collect()
}

/// Outputs of a batched forward pass; rows are `batch × seq_len`, sequence-major.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub hidden_final: Tensor,
    pub hidden_at_freeze_boundary: Tensor,
    pub seq_len: usize,
}

/// Tape handles for one forward pass.
pub(crate) struct Graph {
    pub logits: Var,
    pub hidden_final: Var,
    pub boundary: Var,
}

pub(crate) fn check_tokens(config: &ModelConfig, sequences: &[&[TokenId]]) -> Result<usize> {
    let Some(first) = sequences.first() else {
        return Err(CoopError::InvalidInput("empty batch".into()));
    };
    let t = first.len();
    if t == 0 || t > config.context_length {
        return Err(CoopError::InvalidInput(format!(
            "sequence length {t} outside 1..={}",
            config.context_length
        )));
    }
    for s in sequences {
        if s.len() != t {
            return Err(CoopError::InvalidInput("sequences in a batch must share a length".into()));
        }
        if let Some((position, &token)) =
            s.iter().enumerate().find(|(_, &tok)| tok as usize >= config.vocab_size)
        {
            return Err(CoopError::TokenOutOfRange { token, position, vocab: config.vocab_size });
        }
    }
    Ok(t)
}

/// Places every weight array on the tape; `trainable(i)` decides which are
/// gradient-tracked leaves.
pub(crate) fn insert_weights(
    tape: &mut Tape,
    arrays: &[WeightArray],
    trainable: impl Fn(usize) -> bool,
) -> Result<Vec<Var>> {
    arrays
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let t = Tensor::new(w.shape.clone(), w.data.clone())?;
            Ok(tape.leaf(t, trainable(i))?)
        })
        .collect()
}

pub(crate) fn embed(tape: &mut Tape, vars: &[Var], sequences: &[&[TokenId]]) -> Result<Var> {
    let ids: Vec<usize> = sequences.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
    let positions: Vec<usize> = sequences.iter().flat_map(|s| 0..s.len()).collect();
    let tok = tape.embedding(vars[layout::TOK_EMB], &ids)?;
    let pos = tape.embedding(vars[layout::POS_EMB], &positions)?;
    Ok(tape.add(tok, pos)?)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Runs transformer layers `layers` over the residual stream `x`.
pub(crate) fn blocks(
    tape: &mut Tape,
    vars: &[Var],
    config: &ModelConfig,
    mut x: Var,
    layers: std::ops::Range<usize>,
    seq_len: usize,
) -> Result<Var> {
    for l in layers {
        let p = |slot| vars[layout::layer(l, slot)];
        let h = tape.layernorm(x, p(layout::LN1_GAIN), p(layout::LN1_BIAS))?;
        let q = linear(tape, h, p(layout::WQ), p(layout::BQ))?;
        let k = linear(tape, h, p(layout::WK), p(layout::BK))?;
        let v = linear(tape, h, p(layout::WV), p(layout::BV))?;
        let a = tape.attention(q, k, v, config.n_heads, seq_len)?;
        let a = linear(tape, a, p(layout::WO), p(layout::BO))?;
        x = tape.add(x, a)?;
        let h = tape.layernorm(x, p(layout::LN2_GAIN), p(layout::LN2_BIAS))?;
        let m = linear(tape, h, p(layout::W1), p(layout::B1))?;
        let m = tape.gelu(m)?;
        let m = linear(tape, m, p(layout::W2), p(layout::B2))?;
        x = tape.add(x, m)?;
    }
    Ok(x)
}

/// Final norm and unembedding. Returns `(hidden_final, logits)`.
pub(crate) fn head(tape: &mut Tape, vars: &[Var], config: &ModelConfig, x: Var) -> Result<(Var, Var)> {
    let h = tape.layernorm(x, vars[layout::ln_f_gain(config)], vars[layout::ln_f_bias(config)])?;
    let logits = tape.matmul(h, vars[layout::unembed(config)])?;
    Ok((h, logits))
}

pub(crate) fn build_graph(
    tape: &mut Tape,
    vars: &[Var],
    config: &ModelConfig,
    sequences: &[&[TokenId]],
) -> Result<Graph> {
    let seq_len = check_tokens(config, sequences)?;
    let k = config.freeze_depth;
    let x = embed(tape, vars, sequences)?;
    let boundary = blocks(tape, vars, config, x, 0..k, seq_len)?;
    let x = blocks(tape, vars, config, boundary, k..config.n_layers, seq_len)?;
    let (hidden_final, logits) = head(tape, vars, config, x)?;
    Ok(Graph { logits, hidden_final, boundary })
}

/// Batched inference over equal-length sequences.
pub fn forward_batch(ckpt: &Checkpoint, sequences: &[&[TokenId]]) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = insert_weights(&mut tape, ckpt.weights(), |_| false)?;
    let g = build_graph(&mut tape, &vars, ckpt.config(), sequences)?;
    Ok(ForwardOutput {
        logits: tape.value(g.logits).clone(),
        hidden_final: tape.value(g.hidden_final).clone(),
        hidden_at_freeze_boundary: tape.value(g.boundary).clone(),
        seq_len: sequences[0].len(),
    })
}

/// Single-sequence inference: logits are `T × |V|`, hiddens `T × d`.
pub fn forward(ckpt: &Checkpoint, tokens: &[TokenId]) -> Result<ForwardOutput> {
    forward_batch(ckpt, &[tokens])
}

/// Continues a freeze-boundary residual stream through layers `K..` and the head
/// of `ckpt`. Returns `(hidden_final, logits)`.
pub fn forward_from_boundary(
    ckpt: &Checkpoint,
    boundary: &Tensor,
    seq_len: usize,
) -> Result<(Tensor, Tensor)> {
    let cfg = ckpt.config();
    if boundary.shape().len() != 2 || boundary.shape()[1] != cfg.hidden_dim {
        return Err(CoopError::InvalidInput(format!(
            "boundary hidden {:?} does not match width {}",
            boundary.shape(),
            cfg.hidden_dim
        )));
    }
    let mut tape = Tape::new();
    let vars = insert_weights(&mut tape, ckpt.weights(), |_| false)?;
    let x = tape.constant(boundary.clone())?;
    let x = blocks(&mut tape, &vars, cfg, x, cfg.freeze_depth..cfg.n_layers, seq_len)?;
    let (h, logits) = head(&mut tape, &vars, cfg, x)?;
    Ok((tape.value(h).clone(), tape.value(logits).clone()))
}

/// Residual stream after the frozen prefix (embedding plus layers `0..K`).
pub fn forward_to_boundary(ckpt: &Checkpoint, sequences: &[&[TokenId]]) -> Result<Tensor> {
    let cfg = ckpt.config();
    let seq_len = check_tokens(cfg, sequences)?;
    let mut tape = Tape::new();
    let vars = insert_weights(&mut tape, ckpt.weights(), |_| false)?;
    let x = embed(&mut tape, &vars, sequences)?;
    let b = blocks(&mut tape, &vars, cfg, x, 0..cfg.freeze_depth, seq_len)?;
    Ok(tape.value(b).clone())
}
