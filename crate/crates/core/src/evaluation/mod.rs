//! Per-domain equal-weight evaluation, improvement metrics and routing
//! diagnostics. All losses are in nats.

use std::collections::BTreeMap;

use coop_numerics::{argmax, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{vocab, PackedChunkSet};
use crate::error::{CoopError, Result};
use crate::model::{self, Checkpoint, ModelConfig, TokenId};

/// Batch size used for every evaluation.
pub const EVAL_BATCH_SIZE: usize = 4;

/// Anything that maps a batch of equal-length sequences to next-token logits
/// (`batch × T` rows, sequence-major).
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    fn batch_logits(&self, sequences: &[&[TokenId]]) -> Result<Tensor>;
}

impl LanguageModel for Checkpoint {
    fn config(&self) -> &ModelConfig {
        Checkpoint::config(self)
    }

    fn batch_logits(&self, sequences: &[&[TokenId]]) -> Result<Tensor> {
        Ok(model::forward_batch(self, sequences)?.logits)
    }
}

/// Model input and scored targets for one chunk: the input drops the last
/// token, targets drop the first; padding targets are not scored.
pub fn split_chunk(chunk: &[TokenId]) -> (&[TokenId], Vec<Option<usize>>) {
    let targets = chunk[1..]
        .iter()
        .map(|&t| (t != vocab::PAD).then_some(t as usize))
        .collect();
    (&chunk[..chunk.len() - 1], targets)
}

/// `-log softmax(row)[target]`.
pub fn token_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Summed NLL and token count over `targets` for a `rows × |V|` logit block.
pub fn nll_sum(logits: &[f64], vocab_size: usize, targets: &[Option<usize>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            sum += token_nll(&logits[r * vocab_size..(r + 1) * vocab_size], t);
            count += 1;
        }
    }
    (sum, count)
}

fn check_set(set: &PackedChunkSet, batch_size: usize) -> Result<()> {
    if set.is_empty() {
        return Err(CoopError::InvalidInput(format!("held-out set `{}` is empty", set.domain)));
    }
    if batch_size == 0 {
        return Err(CoopError::InvalidInput("batch_size must be positive".into()));
    }
    Ok(())
}

/// Summed NLL and scored-token count over a whole set, in order.
pub fn eval_totals(model: &dyn LanguageModel, set: &PackedChunkSet, batch_size: usize) -> Result<(f64, usize)> {
    check_set(set, batch_size)?;
    let v = model.config().vocab_size;
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in set.chunks.chunks(batch_size) {
        let split: Vec<_> = batch.iter().map(|c| split_chunk(c)).collect();
        let inputs: Vec<&[TokenId]> = split.iter().map(|(i, _)| *i).collect();
        let targets: Vec<Option<usize>> = split.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let logits = model.batch_logits(&inputs)?;
        let (s, c) = nll_sum(logits.data(), v, &targets);
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(CoopError::InvalidInput(format!("held-out set `{}` has no scored tokens", set.domain)));
    }
    Ok((sum, count))
}

/// Token-averaged cross-entropy over the full held-out set.
pub fn eval_loss_domain(model: &dyn LanguageModel, heldout: &PackedChunkSet, batch_size: usize) -> Result<f64> {
    let (s, c) = eval_totals(model, heldout, batch_size)?;
    Ok(s / c as f64)
}

/// Per-domain losses at the fixed evaluation batch size.
pub fn per_domain_losses(model: &dyn LanguageModel, heldout: &[PackedChunkSet]) -> Result<BTreeMap<String, f64>> {
    heldout
        .iter()
        .map(|set| Ok((set.domain.clone(), eval_loss_domain(model, set, EVAL_BATCH_SIZE)?)))
        .collect()
}

/// Arithmetic mean of the per-domain losses.
pub fn equal_weight(losses: &BTreeMap<String, f64>) -> Result<f64> {
    if losses.is_empty() {
        return Err(CoopError::InvalidInput("equal_weight needs at least one domain".into()));
    }
    Ok(mean(losses.values().copied()))
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// `(baseline − method) / baseline × 100`; positive is better.
pub fn improvement(baseline_loss: f64, method_loss: f64) -> Result<f64> {
    if !(baseline_loss > 0.0 && baseline_loss.is_finite()) {
        return Err(CoopError::InvalidInput(format!("baseline loss must be positive, got {baseline_loss}")));
    }
    Ok((baseline_loss - method_loss) / baseline_loss * 100.0)
}

pub fn perplexity(loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(CoopError::InvalidInput(format!("non-finite loss {loss}")));
    }
    Ok(loss.exp())
}

/// Rows are models, columns domains (in the order given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix {
    pub rows: Vec<String>,
    pub domains: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LossMatrix {
    /// Whether each row's minimum sits at that row's own column.
    pub fn diagonally_dominant(&self) -> bool {
        self.values.iter().enumerate().all(|(i, row)| i < row.len() && argmax_neg(row) == i)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{}\n", self.domains.join(","));
        for (name, row) in self.rows.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

fn argmax_neg(row: &[f64]) -> usize {
    let neg: Vec<f64> = row.iter().map(|v| -v).collect();
    argmax(&neg)
}

/// Loss of every model on every domain.
pub fn cross_domain_matrix(
    models: &[(String, &dyn LanguageModel)],
    heldout: &[PackedChunkSet],
) -> Result<LossMatrix> {
    let mut values = Vec::with_capacity(models.len());
    for (_, m) in models {
        values.push(
            heldout
                .iter()
                .map(|set| eval_loss_domain(*m, set, EVAL_BATCH_SIZE))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(LossMatrix {
        rows: models.iter().map(|(n, _)| n.clone()).collect(),
        domains: heldout.iter().map(|s| s.domain.clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Mean gate vector over each domain's scored tokens.
    pub per_domain_gate_mass: BTreeMap<String, Vec<f64>>,
    pub switches_per_prompt: f64,
    pub max_gate_mean: f64,
    /// Smallest per-token max gate seen.
    pub max_gate_min: f64,
}

/// Gate rows (`T × N`) for the scored positions of each chunk of one domain.
#[derive(Debug, Clone)]
pub struct DomainGates {
    pub domain: String,
    pub prompts: Vec<Tensor>,
}

/// Positions `t > 0` whose argmax expert differs from position `t − 1`.
pub fn count_switches(gates: &Tensor) -> usize {
    let Some((rows, n)) = gates.dims2() else { return 0 };
    let choice: Vec<usize> = (0..rows).map(|r| argmax(&gates.data()[r * n..(r + 1) * n])).collect();
    choice.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn routing_stats(domains: &[DomainGates]) -> Result<RoutingStats> {
    let mut per_domain_gate_mass = BTreeMap::new();
    let (mut switches, mut prompts) = (0usize, 0usize);
    let (mut max_sum, mut max_min, mut tokens) = (0.0, f64::INFINITY, 0usize);
    for d in domains {
        let mut mass: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for g in &d.prompts {
            let (rows, n) = g
                .dims2()
                .ok_or_else(|| CoopError::InvalidInput("gate matrix must be 2-D".into()))?;
            if mass.is_empty() {
                mass = vec![0.0; n];
            }
            for r in 0..rows {
                let row = &g.data()[r * n..(r + 1) * n];
                for (m, v) in mass.iter_mut().zip(row) {
                    *m += v;
                }
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max_sum += mx;
                max_min = max_min.min(mx);
            }
            count += rows;
            switches += count_switches(g);
            prompts += 1;
        }
        if count == 0 {
            return Err(CoopError::InvalidInput(format!("no gated tokens for domain `{}`", d.domain)));
        }
        mass.iter_mut().for_each(|m| *m /= count as f64);
        tokens += count;
        per_domain_gate_mass.insert(d.domain.clone(), mass);
    }
    if tokens == 0 {
        return Err(CoopError::InvalidInput("no gated tokens".into()));
    }
    Ok(RoutingStats {
        per_domain_gate_mass,
        switches_per_prompt: switches as f64 / prompts as f64,
        max_gate_mean: max_sum / tokens as f64,
        max_gate_min: max_min,
    })
}

/// Percentage of positions where two choice sequences agree.
pub fn agreement_pct(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoopError::InvalidInput(format!("choice sequences of length {} and {}", a.len(), b.len())));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64 * 100.0)
}

/// Evaluation summary for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub per_domain_loss: BTreeMap<String, f64>,
    pub ew_loss: f64,
    pub vs_base_pct: f64,
    pub vs_best_specialist_pct: f64,
    pub routing: Option<RoutingStats>,
    pub base_ew_loss: f64,
    pub best_specialist_ew_loss: f64,
    pub base_digest: String,
}

impl EvalReport {
    pub fn new(
        label: impl Into<String>,
        per_domain_loss: BTreeMap<String, f64>,
        base_ew_loss: f64,
        best_specialist_ew_loss: f64,
        base_digest: impl Into<String>,
    ) -> Result<Self> {
        let ew_loss = equal_weight(&per_domain_loss)?;
        Ok(Self {
            label: label.into(),
            vs_base_pct: improvement(base_ew_loss, ew_loss)?,
            vs_best_specialist_pct: improvement(best_specialist_ew_loss, ew_loss)?,
            per_domain_loss,
            ew_loss,
            routing: None,
            base_ew_loss,
            best_specialist_ew_loss,
            base_digest: base_digest.into(),
        })
    }

    pub fn with_routing(mut self, routing: RoutingStats) -> Self {
        self.routing = Some(routing);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoopError::InvalidInput(format!("EvalReport: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(v: &[f64]) -> BTreeMap<String, f64> {
        v.iter().enumerate().map(|(i, &x)| (format!("d{i}"), x)).collect()
    }

    #[test]
    fn reference_metric_values() {
        assert!((equal_weight(&losses(&[1.8791, 2.5565, 2.2194])).unwrap() - 2.2183).abs() < 1e-4);
        assert!((equal_weight(&losses(&[2.0872, 2.8920, 2.9739])).unwrap() - 2.6510).abs() < 1e-4);
        assert_eq!(equal_weight(&losses(&[0.0, 0.0])).unwrap(), 0.0);
        assert!((improvement(2.4039, 2.2183).unwrap() - 7.72).abs() < 0.005);
        assert!((improvement(2.248, 1.930).unwrap() - 14.1).abs() < 0.05);
        assert_eq!(improvement(3.0, 3.0).unwrap(), 0.0);
        assert!(improvement(0.0, 1.0).is_err());
        assert_eq!(perplexity(0.0).unwrap(), 1.0);
        assert!((perplexity(2.248).unwrap() - 9.47).abs() < 0.01);
        assert!((perplexity(1.930).unwrap() - 6.89).abs() < 0.01);
    }

    #[test]
    fn switch_counting() {
        let constant = Tensor::new(vec![6, 2], [1.0, 0.0].repeat(6)).unwrap();
        assert_eq!(count_switches(&constant), 0);
        let alternating = Tensor::new(vec![6, 2], [1.0, 0.0, 0.0, 1.0].repeat(3)).unwrap();
        assert_eq!(count_switches(&alternating), 5);
    }

    #[test]
    fn uniform_gate_statistics() {
        let g = Tensor::full(vec![5, 3], 1.0 / 3.0).unwrap();
        let s = routing_stats(&[DomainGates { domain: "a".into(), prompts: vec![g] }]).unwrap();
        for m in &s.per_domain_gate_mass["a"] {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.max_gate_mean - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.switches_per_prompt, 0.0);
    }

    #[test]
    fn agreement_on_half() {
        assert_eq!(agreement_pct(&[0, 1, 2, 0], &[0, 1, 0, 1]).unwrap(), 50.0);
    }
}
