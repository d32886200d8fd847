//! Shared-base distribution, independent specialist training and the
//! centralized baselines.

use std::collections::BTreeMap;

use coop_numerics::{rng, AdamW, AdamWConfig, NumericsError, ParamSet, Parameter, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::PackedChunkSet;
use crate::error::{CoopError, Result};
use crate::evaluation::{self, split_chunk, EVAL_BATCH_SIZE};
use crate::model::{self, Checkpoint, Digest, ModelConfig, Provenance, TokenId, WeightArray};

/// Optimizer and schedule settings for one training job.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl TrainSettings {
    pub fn new(steps: u64, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self { steps, batch_size, lr, seed, weight_decay: 0.1, warmup_fraction: 0.1 }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            ..AdamWConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoopError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoopError::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(self.weight_decay >= 0.0) {
            return Err(CoopError::InvalidConfig("warmup_fraction in [0,1] and weight_decay ≥ 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub heldout_loss: BTreeMap<String, f64>,
}

/// Per-step train loss plus periodic held-out losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Held-out sets to score every `every` steps (and at the end).
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub every: u64,
    pub heldout: &'a [PackedChunkSet],
}

/// How a specialist job treats the digest of the base it is handed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseGuard {
    Verify(Digest),
    AllowMismatch,
}

impl BaseGuard {
    pub fn check(&self, base: &Checkpoint) -> Result<()> {
        match self {
            BaseGuard::Verify(expected) if *expected != base.digest() => Err(CoopError::BaseMismatch {
                expected: expected.to_hex(),
                found: base.digest().to_hex(),
            }),
            _ => Ok(()),
        }
    }

    /// Checks the base digest recorded in a trained model's provenance.
    pub fn check_lineage(&self, trained: &Checkpoint) -> Result<()> {
        match (self, trained.provenance().base_digest) {
            (BaseGuard::Verify(expected), found) if found != Some(*expected) => Err(CoopError::BaseMismatch {
                expected: expected.to_hex(),
                found: found.map(|d| d.to_hex()).unwrap_or_else(|| "none".into()),
            }),
            _ => Ok(()),
        }
    }
}

fn probe_losses(ckpt: &Checkpoint, probe: &Probe) -> Result<BTreeMap<String, f64>> {
    probe
        .heldout
        .iter()
        .map(|set| Ok((set.domain.clone(), evaluation::eval_loss_domain(ckpt, set, EVAL_BATCH_SIZE)?)))
        .collect()
}

fn divergence(step: u64, last_good: u64, detail: impl Into<String>) -> CoopError {
    CoopError::Divergence { step, last_good, detail: detail.into() }
}

/// Fine-tunes the arrays selected by `trainable` with next-token loss on
/// `data`; everything else is carried over bit-for-bit.
fn train_arrays(
    start: &Checkpoint,
    data: &PackedChunkSet,
    settings: &TrainSettings,
    trainable: &dyn Fn(usize) -> bool,
    probe: Option<Probe>,
    provenance: Provenance,
) -> Result<(Checkpoint, TrainingLog)> {
    settings.validate()?;
    let config = *start.config();
    if settings.steps > 0 && data.is_empty() {
        return Err(CoopError::InvalidInput(format!("training set `{}` is empty", data.domain)));
    }
    if let Some(len) = data.chunk_len() {
        if len < 2 || len - 1 > config.context_length {
            return Err(CoopError::InvalidInput(format!(
                "chunk length {len} does not fit context {}",
                config.context_length
            )));
        }
    }
    let mut arrays: Vec<WeightArray> = start.weights().to_vec();
    let train_idx: Vec<usize> = (0..arrays.len()).filter(|&i| trainable(i)).collect();
    let mut params = ParamSet::new(
        train_idx
            .iter()
            .map(|&i| Parameter::new(arrays[i].name.clone(), std::mem::take(&mut arrays[i].data)))
            .collect(),
    );
    let mut opt = AdamW::new(settings.adamw(), &params);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut last_good = 0u64;

    let snapshot = |arrays: &[WeightArray], params: &ParamSet, prov: Provenance| -> Result<Checkpoint> {
        let mut out = arrays.to_vec();
        for (p, &i) in params.iter().zip(&train_idx) {
            out[i].data = p.value.clone();
        }
        Checkpoint::assemble(config, out, prov)
    };

    for step in 1..=settings.steps {
        let mut batch: Vec<&[TokenId]> = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng::indexed_stream(settings.seed, "batch-order", epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&data.chunks[order[cursor]]);
            cursor += 1;
        }
        let split: Vec<_> = batch.iter().map(|c| split_chunk(c)).collect();
        let inputs: Vec<&[TokenId]> = split.iter().map(|(i, _)| *i).collect();
        let targets: Vec<Option<usize>> = split.iter().flat_map(|(_, t)| t.iter().copied()).collect();

        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(arrays.len());
        let mut pi = 0;
        for (i, w) in arrays.iter().enumerate() {
            let v = if pi < train_idx.len() && train_idx[pi] == i {
                let p = params.get(pi);
                pi += 1;
                tape.param(Tensor::new(w.shape.clone(), p.value.clone())?)?
            } else {
                tape.constant(Tensor::new(w.shape.clone(), w.data.clone())?)?
            };
            vars.push(v);
        }
        let step_result = (|| -> Result<f64> {
            let g = model::build_graph(&mut tape, &vars, &config, &inputs)?;
            let loss = tape.cross_entropy(g.logits, &targets)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(divergence(step, last_good, format!("train loss {value}")));
            }
            tape.backward(loss)?;
            Ok(value)
        })();
        let value = match step_result {
            Ok(v) => v,
            Err(CoopError::Numerics(e @ NumericsError::NonFinite { .. })) => {
                return Err(divergence(step, last_good, e.to_string()))
            }
            Err(e) => return Err(e),
        };
        let mut pi = 0;
        for (i, v) in vars.iter().enumerate() {
            if pi < train_idx.len() && train_idx[pi] == i {
                let g = tape.grad(*v).expect("trainable leaf has a gradient");
                params.get_mut(pi).grad.copy_from_slice(g);
                pi += 1;
            }
        }
        if let Err(e) = opt.step(&mut params, settings.steps) {
            return Err(match e {
                NumericsError::NonFiniteGradient(name) => {
                    divergence(step, last_good, format!("non-finite gradient in `{name}`"))
                }
                other => other.into(),
            });
        }
        if params.iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(divergence(step, last_good, "non-finite parameters after update"));
        }
        last_good = step;
        log.steps.push(StepRecord { step, train_loss: value });
        if let Some(p) = &probe {
            if p.every > 0 && step % p.every == 0 && step != settings.steps {
                let ckpt = snapshot(&arrays, &params, Provenance::default())?;
                log.evals.push(EvalRecord { step, heldout_loss: probe_losses(&ckpt, p)? });
            }
        }
    }
    let out = snapshot(&arrays, &params, provenance)?;
    if let Some(p) = &probe {
        log.evals.push(EvalRecord { step: settings.steps, heldout_loss: probe_losses(&out, p)? });
    }
    Ok((out, log))
}

fn annotations(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Base checkpoint: a raw init, optionally pretrained on a mixed stream with
/// every array trainable.
pub fn make_base(
    config: ModelConfig,
    pretrain_steps: u64,
    mixed: &PackedChunkSet,
    seed: u64,
    settings: &TrainSettings,
) -> Result<Checkpoint> {
    let init = model::init_model(config, seed)?;
    if pretrain_steps == 0 {
        return Ok(init);
    }
    let s = TrainSettings { steps: pretrain_steps, seed, ..*settings };
    let provenance = Provenance {
        seed,
        train_steps: pretrain_steps,
        domain_label: Some(mixed.domain.clone()),
        method: Some("pretrain".into()),
        ..Provenance::default()
    };
    Ok(train_arrays(&init, mixed, &s, &|_| true, None, provenance)?.0)
}

/// One contributor's job description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistJob {
    pub domain: String,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl SpecialistJob {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings::new(self.steps, self.batch_size, self.lr, self.seed)
    }
}

/// The cooperative run's shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CooperativeConfig {
    pub base: Digest,
    pub specialists: Vec<SpecialistJob>,
    pub freeze_depth: usize,
    pub pretrain_steps: u64,
}

impl CooperativeConfig {
    /// Step budget for the equal-compute monolithic baseline.
    pub fn total_specialist_steps(&self) -> u64 {
        self.specialists.iter().map(|s| s.steps).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub ckpt: Checkpoint,
    pub log: TrainingLog,
}

/// Fine-tunes a copy of `base` on one domain with layers below `freeze_depth`
/// (and the embeddings) held fixed.
pub fn train_specialist(
    base: &Checkpoint,
    guard: BaseGuard,
    domain: &PackedChunkSet,
    settings: &TrainSettings,
    freeze_depth: usize,
    probe: Option<Probe>,
) -> Result<TrainedModel> {
    guard.check(base)?;
    finetune(base, domain, settings, freeze_depth, probe, "specialist", &domain.domain)
}

/// Equal-compute baseline: one model on the mixture, same freeze rule.
pub fn train_monolithic(
    base: &Checkpoint,
    guard: BaseGuard,
    mixed: &PackedChunkSet,
    settings: &TrainSettings,
    freeze_depth: usize,
    probe: Option<Probe>,
) -> Result<TrainedModel> {
    guard.check(base)?;
    finetune(base, mixed, settings, freeze_depth, probe, "monolithic", &mixed.domain)
}

fn finetune(
    base: &Checkpoint,
    data: &PackedChunkSet,
    settings: &TrainSettings,
    freeze_depth: usize,
    probe: Option<Probe>,
    method: &str,
    label: &str,
) -> Result<TrainedModel> {
    let config = base.config().with_freeze_depth(freeze_depth);
    config.validate()?;
    let start = base.with_config(config)?;
    let provenance = Provenance {
        base_digest: Some(base.digest()),
        seed: settings.seed,
        train_steps: settings.steps,
        domain_label: Some(label.to_string()),
        method: Some(method.to_string()),
        annotations: annotations(&[
            ("batch_size", settings.batch_size.to_string()),
            ("freeze_depth", freeze_depth.to_string()),
            ("lr", settings.lr.to_string()),
        ]),
    };
    let (ckpt, log) =
        train_arrays(&start, data, settings, &|i| model::is_trainable(&config, i), probe, provenance)?;
    Ok(TrainedModel { ckpt, log })
}

/// Smallest parameter ratio accepted for the capacity control.
pub const MIN_WIDE_RATIO: f64 = 3.0;

/// Capacity control: a wider model trained from its own init on the mixture.
pub fn train_wider(
    wide_config: ModelConfig,
    reference: &ModelConfig,
    mixed: &PackedChunkSet,
    settings: &TrainSettings,
) -> Result<Checkpoint> {
    wide_config.validate()?;
    let ratio = wide_config.param_count() as f64 / reference.param_count() as f64;
    if ratio < MIN_WIDE_RATIO {
        return Err(CoopError::InvalidConfig(format!(
            "wider model has {ratio:.2}x the reference parameters; at least {MIN_WIDE_RATIO}x required"
        )));
    }
    let cfg = wide_config.with_freeze_depth(0);
    let init = model::init_model(cfg, settings.seed)?;
    let provenance = Provenance {
        seed: settings.seed,
        train_steps: settings.steps,
        domain_label: Some(mixed.domain.clone()),
        method: Some("wider".into()),
        annotations: annotations(&[("param_ratio", format!("{ratio:.4}"))]),
        ..Provenance::default()
    };
    if settings.steps == 0 {
        return init.with_provenance(provenance);
    }
    Ok(train_arrays(&init, mixed, settings, &|_| true, None, provenance)?.0)
}
