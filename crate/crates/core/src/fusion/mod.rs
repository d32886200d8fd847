//! Post-hoc fusion of specialists: learned routers, soft/hard/sparse fused
//! inference, oracle dispatch and the weight-averaging baseline.

mod manifest;
mod router;

use std::collections::BTreeMap;

use coop_numerics::{argmax, rng, AdamW, Parameter, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use manifest::FusedManifest;
pub use router::{InputMode, Router, RouterArray, RouterKind};

use crate::corpus::PackedChunkSet;
use crate::error::{CoopError, Result};
use crate::evaluation::{self, split_chunk, LanguageModel, LossMatrix};
use crate::model::{self, Checkpoint, Digest, ModelConfig, Provenance, TokenId, WeightArray};
use crate::protocol::TrainSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Soft,
    Hard,
    SparseTop1,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Soft => "soft",
            FusionMode::Hard => "hard",
            FusionMode::SparseTop1 => "sparse_top1",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = CoopError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(FusionMode::Soft),
            "hard" => Ok(FusionMode::Hard),
            "sparse_top1" => Ok(FusionMode::SparseTop1),
            other => Err(CoopError::InvalidConfig(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Router input: per-position specialist mean or the base hidden state.
pub fn router_input(router: &Router, hiddens: &[&Tensor], base_hidden: Option<&Tensor>) -> Result<Tensor> {
    match router.input_mode {
        InputMode::BaseHidden => base_hidden
            .cloned()
            .ok_or_else(|| CoopError::InvalidInput("base_hidden router input requires the base hidden state".into())),
        InputMode::SpecialistMean => {
            if hiddens.len() != router.n_experts {
                return Err(CoopError::InvalidInput(format!(
                    "{} specialist hiddens for a {}-expert router",
                    hiddens.len(),
                    router.n_experts
                )));
            }
            let shape = hiddens[0].shape().to_vec();
            if hiddens.iter().any(|h| h.shape() != shape.as_slice()) {
                return Err(CoopError::InvalidInput("specialist hidden states differ in shape".into()));
            }
            let mut out = vec![0.0; hiddens[0].len()];
            for h in hiddens {
                for (o, v) in out.iter_mut().zip(h.data()) {
                    *o += v;
                }
            }
            let n = hiddens.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Ok(Tensor::new(shape, out)?)
        }
    }
}

/// `T × N` gates from per-specialist hiddens (or the base hidden).
pub fn compute_gates(router: &Router, hiddens: &[&Tensor], base_hidden: Option<&Tensor>) -> Result<Tensor> {
    if router.kind == RouterKind::Uniform && router.input_mode == InputMode::SpecialistMean {
        let rows = hiddens.first().map(|h| h.shape()[0]).unwrap_or(0);
        if let Some(h) = hiddens.first() {
            if h.shape().get(1) != Some(&router.hidden_dim) {
                return Err(CoopError::InvalidInput("hidden width does not match router".into()));
            }
        }
        return Ok(Tensor::full(vec![rows, router.n_experts], 1.0 / router.n_experts as f64)?);
    }
    router.gates_from_input(&router_input(router, hiddens, base_hidden)?)
}

/// One-hot rows at each row's argmax (lowest index on ties).
pub fn harden(gates: &Tensor) -> Tensor {
    let (rows, n) = gates.dims2().expect("gates are 2-D");
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        out[r * n + argmax(&gates.data()[r * n..(r + 1) * n])] = 1.0;
    }
    Tensor::new(vec![rows, n], out).expect("shape matches")
}

/// `Σᵢ gates[:, i] · logitsᵢ`, row by row.
pub fn mix_logits(gates: &Tensor, expert_logits: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = tape.constant(gates.clone())?;
    let experts = expert_logits
        .iter()
        .map(|l| tape.constant((*l).clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = tape.gate_mix(g, &experts)?;
    Ok(tape.value(out).clone())
}

/// N specialists, a router and an inference mode.
#[derive(Debug, Clone)]
pub struct FusedModel {
    specialists: Vec<Checkpoint>,
    router: Router,
    mode: FusionMode,
    base: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub logits: Tensor,
    pub gates: Tensor,
}

#[derive(Debug, Clone)]
pub struct SparseOutput {
    pub logits: Tensor,
    /// Expert chosen at each row.
    pub choices: Vec<usize>,
}

impl FusedModel {
    pub fn new(specialists: Vec<Checkpoint>, router: Router, mode: FusionMode, base: Option<Checkpoint>) -> Result<Self> {
        let Some(first) = specialists.first() else {
            return Err(CoopError::InvalidInput("a fused model needs at least one specialist".into()));
        };
        let cfg = *first.config();
        if let Some(bad) = specialists.iter().find(|s| *s.config() != cfg) {
            return Err(CoopError::InvalidInput(format!(
                "specialist {} has a different config from specialist {}",
                bad.digest(),
                first.digest()
            )));
        }
        if router.n_experts != specialists.len() || router.hidden_dim != cfg.hidden_dim {
            return Err(CoopError::InvalidInput(format!(
                "router is {}×{} but the cooperative has {} specialists of width {}",
                router.n_experts,
                router.hidden_dim,
                specialists.len(),
                cfg.hidden_dim
            )));
        }
        router.validate()?;
        if let Some(b) = &base {
            let bc = b.config();
            if bc.hidden_dim != cfg.hidden_dim || bc.vocab_size != cfg.vocab_size || bc.context_length != cfg.context_length {
                return Err(CoopError::InvalidInput("base model shape differs from the specialists".into()));
            }
        }
        if router.input_mode == InputMode::BaseHidden && base.is_none() {
            return Err(CoopError::InvalidInput("base_hidden routing requires the base checkpoint".into()));
        }
        Ok(Self { specialists, router, mode, base })
    }

    pub fn specialists(&self) -> &[Checkpoint] {
        &self.specialists
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn base(&self) -> Option<&Checkpoint> {
        self.base.as_ref()
    }

    pub fn with_mode(&self, mode: FusionMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn with_router(&self, router: Router) -> Result<Self> {
        Self::new(self.specialists.clone(), router, self.mode, self.base.clone())
    }

    fn base_hidden(&self, sequences: &[&[TokenId]]) -> Result<Option<Tensor>> {
        match (&self.base, self.router.input_mode) {
            (Some(b), InputMode::BaseHidden) => Ok(Some(model::forward_batch(b, sequences)?.hidden_final)),
            _ => Ok(None),
        }
    }

    /// Dense fused pass (all specialists run). Soft or hard mode.
    pub fn forward_batch(&self, sequences: &[&[TokenId]]) -> Result<FusedOutput> {
        if self.mode == FusionMode::SparseTop1 {
            return Err(CoopError::InvalidInput("sparse_top1 models are evaluated with sparse_forward".into()));
        }
        self.dense(sequences, self.mode)
    }

    fn dense(&self, sequences: &[&[TokenId]], mode: FusionMode) -> Result<FusedOutput> {
        let outs = self
            .specialists
            .iter()
            .map(|s| model::forward_batch(s, sequences))
            .collect::<Result<Vec<_>>>()?;
        let hiddens: Vec<&Tensor> = outs.iter().map(|o| &o.hidden_final).collect();
        let base_hidden = self.base_hidden(sequences)?;
        let mut gates = compute_gates(&self.router, &hiddens, base_hidden.as_ref())?;
        if mode == FusionMode::Hard {
            gates = harden(&gates);
        }
        let logits: Vec<&Tensor> = outs.iter().map(|o| &o.logits).collect();
        Ok(FusedOutput { logits: mix_logits(&gates, &logits)?, gates })
    }

    /// Dense argmax expert per row, regardless of mode.
    pub fn dense_choices(&self, sequences: &[&[TokenId]]) -> Result<Vec<usize>> {
        let g = self.dense(sequences, FusionMode::Soft)?.gates;
        let n = self.router.n_experts;
        Ok(g.data().chunks(n).map(argmax).collect())
    }

    /// Top-1 inference: the frozen prefix runs once, then only the selected
    /// expert's upper layers produce each position's logits.
    ///
    /// Gate input: the base hidden in `base_hidden` mode (or whenever `K = 0`);
    /// otherwise the shared prefix is normalized and routed to pick a
    /// provisional expert, and the final choice is gated from that expert's
    /// own final hidden state.
    pub fn sparse_forward(&self, sequences: &[&[TokenId]]) -> Result<SparseOutput> {
        let cfg = *self.specialists[0].config();
        let n = self.specialists.len();
        let mut upper: Vec<Option<(Tensor, Tensor)>> = vec![None; n];
        let seq_len = model::check_tokens(&cfg, sequences)?;
        let k = cfg.freeze_depth;
        let boundary = if k > 0 { Some(model::forward_to_boundary(&self.specialists[0], sequences)?) } else { None };
        let run = |e: usize, upper: &mut Vec<Option<(Tensor, Tensor)>>| -> Result<()> {
            if upper[e].is_none() {
                upper[e] = Some(match &boundary {
                    Some(b) => model::forward_from_boundary(&self.specialists[e], b, seq_len)?,
                    None => {
                        let o = model::forward_batch(&self.specialists[e], sequences)?;
                        (o.hidden_final, o.logits)
                    }
                });
            }
            Ok(())
        };
        let choices: Vec<usize> = if self.router.input_mode == InputMode::BaseHidden || k == 0 {
            let base = self.base.as_ref().ok_or_else(|| {
                CoopError::InvalidInput("sparse routing without a shared prefix needs the base checkpoint".into())
            })?;
            let h = model::forward_batch(base, sequences)?.hidden_final;
            let g = self.router.gates_from_input(&h)?;
            g.data().chunks(n).map(argmax).collect()
        } else {
            let b = boundary.as_ref().expect("K > 0");
            let provisional: Vec<usize> = self.router.gates_from_input(&standardize(b))?.data().chunks(n).map(argmax).collect();
            let mut chosen = vec![0; provisional.len()];
            let d = cfg.hidden_dim;
            for e in 0..n {
                let rows: Vec<usize> = (0..provisional.len()).filter(|&r| provisional[r] == e).collect();
                if rows.is_empty() {
                    continue;
                }
                run(e, &mut upper)?;
                let (h, _) = upper[e].as_ref().expect("computed");
                let mut sel = Vec::with_capacity(rows.len() * d);
                for &r in &rows {
                    sel.extend_from_slice(h.row(r));
                }
                let g = self.router.gates_from_input(&Tensor::new(vec![rows.len(), d], sel)?)?;
                for (&r, row) in rows.iter().zip(g.data().chunks(n)) {
                    chosen[r] = argmax(row);
                }
            }
            chosen
        };
        let v = cfg.vocab_size;
        let mut logits = vec![0.0; choices.len() * v];
        for (r, &e) in choices.iter().enumerate() {
            run(e, &mut upper)?;
            let (_, l) = upper[e].as_ref().expect("computed");
            logits[r * v..(r + 1) * v].copy_from_slice(l.row(r));
        }
        Ok(SparseOutput { logits: Tensor::new(vec![choices.len(), v], logits)?, choices })
    }
}

/// Row standardization without affine parameters.
fn standardize(x: &Tensor) -> Tensor {
    let (rows, d) = x.dims2().expect("2-D");
    let mut out = x.data().to_vec();
    for r in out.chunks_mut(d).take(rows) {
        let mu = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-10).sqrt();
        r.iter_mut().for_each(|v| *v = (*v - mu) * inv);
    }
    Tensor::new(vec![rows, d], out).expect("shape")
}

impl LanguageModel for FusedModel {
    fn config(&self) -> &ModelConfig {
        self.specialists[0].config()
    }

    fn batch_logits(&self, sequences: &[&[TokenId]]) -> Result<Tensor> {
        match self.mode {
            FusionMode::SparseTop1 => Ok(self.sparse_forward(sequences)?.logits),
            m => Ok(self.dense(sequences, m)?.logits),
        }
    }
}

pub fn fused_forward(fm: &FusedModel, tokens: &[TokenId]) -> Result<FusedOutput> {
    fm.forward_batch(&[tokens])
}

pub fn sparse_forward(fm: &FusedModel, tokens: &[TokenId]) -> Result<SparseOutput> {
    fm.sparse_forward(&[tokens])
}

/// Scored-position gate rows for each chunk of a held-out set.
pub fn domain_gates(fm: &FusedModel, heldout: &PackedChunkSet) -> Result<evaluation::DomainGates> {
    let mut prompts = Vec::with_capacity(heldout.len());
    let n = fm.router.n_experts;
    for batch in heldout.chunks.chunks(evaluation::EVAL_BATCH_SIZE) {
        let split: Vec<_> = batch.iter().map(|c| split_chunk(c)).collect();
        let inputs: Vec<&[TokenId]> = split.iter().map(|(i, _)| *i).collect();
        let gates = fm.dense(&inputs, if fm.mode == FusionMode::Hard { FusionMode::Hard } else { FusionMode::Soft })?.gates;
        let t = inputs[0].len();
        for (b, (_, targets)) in split.iter().enumerate() {
            let mut rows = Vec::new();
            for (p, tg) in targets.iter().enumerate() {
                if tg.is_some() {
                    rows.extend_from_slice(&gates.data()[(b * t + p) * n..(b * t + p + 1) * n]);
                }
            }
            let count = rows.len() / n;
            prompts.push(Tensor::new(vec![count, n], rows)?);
        }
    }
    Ok(evaluation::DomainGates { domain: heldout.domain.clone(), prompts })
}

pub fn routing_diagnostics(fm: &FusedModel, heldout: &[PackedChunkSet]) -> Result<evaluation::RoutingStats> {
    let gates = heldout.iter().map(|h| domain_gates(fm, h)).collect::<Result<Vec<_>>>()?;
    evaluation::routing_stats(&gates)
}

/// Percentage of scored positions where sparse and dense routing pick the
/// same expert.
pub fn sparse_agreement(fm: &FusedModel, heldout: &[PackedChunkSet]) -> Result<f64> {
    let (mut sparse, mut dense) = (Vec::new(), Vec::new());
    for set in heldout {
        for batch in set.chunks.chunks(evaluation::EVAL_BATCH_SIZE) {
            let split: Vec<_> = batch.iter().map(|c| split_chunk(c)).collect();
            let inputs: Vec<&[TokenId]> = split.iter().map(|(i, _)| *i).collect();
            let s = fm.sparse_forward(&inputs)?.choices;
            let d = fm.dense_choices(&inputs)?;
            let mask = split.iter().flat_map(|(_, t)| t.iter().map(|x| x.is_some()));
            for ((a, b), keep) in s.into_iter().zip(d).zip(mask) {
                if keep {
                    sparse.push(a);
                    dense.push(b);
                }
            }
        }
    }
    evaluation::agreement_pct(&sparse, &dense)
}

struct CachedChunk {
    input: Vec<f64>,
    logits: Vec<Vec<f64>>,
    targets: Vec<Option<usize>>,
}

/// Trains only the router, on the fused next-token loss over `mixed`.
///
/// Specialists are frozen, so their logits and router inputs are computed once
/// up front and reused for every step.
pub fn train_router(
    specialists: &[Checkpoint],
    base: Option<&Checkpoint>,
    kind: RouterKind,
    input_mode: InputMode,
    mixed: &PackedChunkSet,
    settings: &TrainSettings,
) -> Result<Router> {
    if kind == RouterKind::Uniform {
        return Err(CoopError::InvalidInput("uniform router has no trainable parameters".into()));
    }
    if mixed.is_empty() {
        return Err(CoopError::InvalidInput("router training stream is empty".into()));
    }
    let Some(first) = specialists.first() else {
        return Err(CoopError::InvalidInput("no specialists to route between".into()));
    };
    let cfg = *first.config();
    let router = Router::init(kind, input_mode, specialists.len(), cfg.hidden_dim, settings.seed)?;
    let fm = FusedModel::new(specialists.to_vec(), router.clone(), FusionMode::Soft, base.cloned())?;
    if settings.steps == 0 {
        return Ok(router);
    }
    let (n, d, v) = (specialists.len(), cfg.hidden_dim, cfg.vocab_size);

    let mut cache = Vec::with_capacity(mixed.len());
    for batch in mixed.chunks.chunks(8) {
        let split: Vec<_> = batch.iter().map(|c| split_chunk(c)).collect();
        let inputs: Vec<&[TokenId]> = split.iter().map(|(i, _)| *i).collect();
        let outs = specialists.iter().map(|s| model::forward_batch(s, &inputs)).collect::<Result<Vec<_>>>()?;
        let hiddens: Vec<&Tensor> = outs.iter().map(|o| &o.hidden_final).collect();
        let base_hidden = fm.base_hidden(&inputs)?;
        let input = router_input(&router, &hiddens, base_hidden.as_ref())?;
        let t = inputs[0].len();
        for (b, (_, targets)) in split.into_iter().enumerate() {
            cache.push(CachedChunk {
                input: input.data()[b * t * d..(b + 1) * t * d].to_vec(),
                logits: outs.iter().map(|o| o.logits.data()[b * t * v..(b + 1) * t * v].to_vec()).collect(),
                targets,
            });
        }
    }

    let mut params = ParamSet::new(router.arrays.iter().map(|a| Parameter::new(a.name.clone(), a.data.clone())).collect());
    let shapes: Vec<Vec<usize>> = router.arrays.iter().map(|a| a.shape.clone()).collect();
    let mut opt = AdamW::new(
        coop_numerics::AdamWConfig {
            learning_rate: settings.lr,
            weight_decay: settings.weight_decay,
            warmup_fraction: settings.warmup_fraction,
            ..Default::default()
        },
        &params,
    );
    let mut order: Vec<usize> = Vec::new();
    let (mut cursor, mut epoch) = (0usize, 0u64);
    for step in 1..=settings.steps {
        let mut picked = Vec::with_capacity(settings.batch_size);
        while picked.len() < settings.batch_size.max(1) {
            if cursor == order.len() {
                order = (0..cache.len()).collect();
                order.shuffle(&mut rng::indexed_stream(settings.seed, "router-order", epoch));
                epoch += 1;
                cursor = 0;
            }
            picked.push(&cache[order[cursor]]);
            cursor += 1;
        }
        let rows: usize = picked.iter().map(|c| c.targets.len()).sum();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![rows, d], picked.iter().flat_map(|c| c.input.iter().copied()).collect())?)?;
        let experts = (0..n)
            .map(|e| {
                let data: Vec<f64> = picked.iter().flat_map(|c| c.logits[e].iter().copied()).collect();
                Ok(tape.constant(Tensor::new(vec![rows, v], data)?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let pv = params
            .iter()
            .zip(&shapes)
            .map(|(p, s)| Ok(tape.param(Tensor::new(s.clone(), p.value.clone())?)?))
            .collect::<Result<Vec<_>>>()?;
        let z = router.logits_on_tape(&mut tape, h, &pv)?;
        let g = tape.softmax(z)?;
        let mixed_logits = tape.gate_mix(g, &experts)?;
        let targets: Vec<Option<usize>> = picked.iter().flat_map(|c| c.targets.iter().copied()).collect();
        let loss = tape.cross_entropy(mixed_logits, &targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(CoopError::Divergence { step, last_good: step - 1, detail: format!("router loss {value}") });
        }
        tape.backward(loss)?;
        for (i, var) in pv.iter().enumerate() {
            params.get_mut(i).grad.copy_from_slice(tape.grad(*var).expect("router param grad"));
        }
        opt.step(&mut params, settings.steps).map_err(|e| match e {
            coop_numerics::NumericsError::NonFiniteGradient(name) => CoopError::Divergence {
                step,
                last_good: step - 1,
                detail: format!("non-finite gradient in router `{name}`"),
            },
            other => other.into(),
        })?;
    }
    let mut out = router;
    for (a, p) in out.arrays.iter_mut().zip(params.iter()) {
        a.data = p.value.clone();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Domain → index of the specialist with the lowest held-out loss.
    pub assignment: BTreeMap<String, usize>,
    pub ew_loss: f64,
}

/// Domain-level oracle from a specialists × domains loss matrix.
pub fn oracle_from_matrix(matrix: &LossMatrix) -> Result<OracleResult> {
    if matrix.values.is_empty() || matrix.domains.is_empty() {
        return Err(CoopError::InvalidInput("empty loss matrix".into()));
    }
    let mut assignment = BTreeMap::new();
    let mut chosen = Vec::with_capacity(matrix.domains.len());
    for (j, domain) in matrix.domains.iter().enumerate() {
        let col: Vec<f64> = matrix.values.iter().map(|row| -row[j]).collect();
        let best = argmax(&col);
        assignment.insert(domain.clone(), best);
        chosen.push(matrix.values[best][j]);
    }
    Ok(OracleResult { assignment, ew_loss: evaluation::mean(chosen) })
}

pub fn oracle_dispatch(specialists: &[Checkpoint], heldout: &[PackedChunkSet]) -> Result<OracleResult> {
    let models: Vec<(String, &dyn LanguageModel)> =
        specialists.iter().enumerate().map(|(i, s)| (format!("s{i}"), s as &dyn LanguageModel)).collect();
    oracle_from_matrix(&evaluation::cross_domain_matrix(&models, heldout)?)
}

/// Digest of the base every specialist was trained from, if they agree.
pub fn shared_base(specialists: &[Checkpoint]) -> Option<Digest> {
    let first = specialists.first()?.provenance().base_digest?;
    specialists.iter().all(|s| s.provenance().base_digest == Some(first)).then_some(first)
}

/// Element-wise parameter mean.
pub fn average_checkpoints(specialists: &[Checkpoint]) -> Result<Checkpoint> {
    let Some(first) = specialists.first() else {
        return Err(CoopError::InvalidInput("nothing to average".into()));
    };
    if let Some(bad) = specialists.iter().find(|s| s.config() != first.config()) {
        return Err(CoopError::InvalidInput(format!("config mismatch: {} vs {}", bad.digest(), first.digest())));
    }
    let base = specialists.iter().map(|s| s.provenance().base_digest).collect::<Vec<_>>();
    if base.iter().any(|b| *b != base[0]) {
        return Err(CoopError::BaseMismatch {
            expected: base[0].map(|d| d.to_hex()).unwrap_or_default(),
            found: base.iter().find(|b| **b != base[0]).and_then(|b| b.map(|d| d.to_hex())).unwrap_or_default(),
        });
    }
    let n = specialists.len() as f64;
    let weights = first
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut data = vec![0.0; w.data.len()];
            for s in specialists {
                for (o, v) in data.iter_mut().zip(&s.weights()[i].data) {
                    *o += v;
                }
            }
            data.iter_mut().for_each(|o| *o /= n);
            WeightArray { name: w.name.clone(), shape: w.shape.clone(), data }
        })
        .collect();
    let provenance = Provenance {
        base_digest: base[0],
        method: Some("weight_average".into()),
        annotations: [("n_models".to_string(), specialists.len().to_string())].into(),
        ..Provenance::default()
    };
    Checkpoint::assemble(*first.config(), weights, provenance)
}
