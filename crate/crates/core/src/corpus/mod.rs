//! Seeded synthetic domains, packed into fixed-length chunks with a
//! per-chunk train/held-out split.

mod generators;
pub mod vocab;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use coop_numerics::rng::{self, Rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use generators::MarkovDialect;

use crate::error::{CoopError, Result};
use crate::model::TokenId;

/// Smallest chunk count that can honor a split.
pub const MIN_CHUNKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeneratorKind {
    ArithmeticExpressions,
    BalancedBrackets,
    SortedRuns,
    MarkovDialect(u32),
    CopyTasks,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::ArithmeticExpressions => f.write_str("arithmetic_expressions"),
            GeneratorKind::BalancedBrackets => f.write_str("balanced_brackets"),
            GeneratorKind::SortedRuns => f.write_str("sorted_runs"),
            GeneratorKind::MarkovDialect(id) => write!(f, "markov_dialect({id})"),
            GeneratorKind::CopyTasks => f.write_str("copy_tasks"),
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = CoopError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "arithmetic_expressions" => GeneratorKind::ArithmeticExpressions,
            "balanced_brackets" => GeneratorKind::BalancedBrackets,
            "sorted_runs" => GeneratorKind::SortedRuns,
            "copy_tasks" => GeneratorKind::CopyTasks,
            _ => {
                let id = s
                    .strip_prefix("markov_dialect(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.trim().parse::<u32>().ok())
                    .ok_or_else(|| CoopError::InvalidConfig(format!("unknown generator kind `{s}`")))?;
                GeneratorKind::MarkovDialect(id)
            }
        })
    }
}

impl Serialize for GeneratorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GeneratorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub seed: u64,
    pub n_chunks: usize,
    pub holdout_fraction: f64,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, kind: GeneratorKind, seed: u64, n_chunks: usize) -> Self {
        Self { name: name.into(), kind, seed, n_chunks, holdout_fraction: 0.10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(CoopError::InvalidConfig("domain name must be non-empty".into()));
        }
        if self.n_chunks < MIN_CHUNKS {
            return Err(CoopError::InvalidConfig(format!(
                "domain `{}`: n_chunks {} is below the minimum of {MIN_CHUNKS} needed for a split",
                self.name, self.n_chunks
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(CoopError::InvalidConfig(format!(
                "domain `{}`: holdout_fraction {} not in (0, 1)",
                self.name, self.holdout_fraction
            )));
        }
        Ok(())
    }

    fn heldout_count(&self) -> usize {
        ((self.n_chunks as f64 * self.holdout_fraction).round() as usize).clamp(1, self.n_chunks - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

/// Fixed-length token chunks from one domain (or a mixture).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedChunkSet {
    pub domain: String,
    pub split: Split,
    pub chunks: Vec<Vec<TokenId>>,
    /// Source domain of each chunk.
    pub origin: Vec<String>,
    /// Generation-order index of each chunk within its source domain.
    pub source_index: Vec<usize>,
}

impl PackedChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk_len(&self) -> Option<usize> {
        self.chunks.first().map(Vec::len)
    }

    /// Scored (non-pad) next-token targets across the whole set.
    pub fn target_count(&self) -> usize {
        self.chunks.iter().map(|c| c[1..].iter().filter(|&&t| t != vocab::PAD).count()).sum()
    }

    /// Writes one line per chunk: `domain<TAB>split<TAB>index<TAB>ids…`.
    pub fn dump(&self, mut w: impl Write) -> std::io::Result<()> {
        for ((chunk, origin), idx) in self.chunks.iter().zip(&self.origin).zip(&self.source_index) {
            let ids: Vec<String> = chunk.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{origin}\t{}\t{idx}\t{}", self.split, ids.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub spec: DomainSpec,
    pub train: PackedChunkSet,
    pub heldout: PackedChunkSet,
}

enum Sampler {
    Arithmetic,
    Brackets,
    Sorted,
    Markov(MarkovDialect),
    Copy,
}

impl Sampler {
    fn new(kind: GeneratorKind) -> Self {
        match kind {
            GeneratorKind::ArithmeticExpressions => Sampler::Arithmetic,
            GeneratorKind::BalancedBrackets => Sampler::Brackets,
            GeneratorKind::SortedRuns => Sampler::Sorted,
            GeneratorKind::MarkovDialect(id) => Sampler::Markov(MarkovDialect::new(id)),
            GeneratorKind::CopyTasks => Sampler::Copy,
        }
    }

    fn sample(&self, rng: &mut Rng) -> Vec<TokenId> {
        match self {
            Sampler::Arithmetic => generators::arithmetic(rng),
            Sampler::Brackets => generators::balanced_brackets(rng),
            Sampler::Sorted => generators::sorted_runs(rng),
            Sampler::Markov(m) => m.sample(rng),
            Sampler::Copy => generators::copy_task(rng),
        }
    }
}

/// Greedy packing: samples joined by a separator, never split across chunks
/// (over-long samples are truncated), short tails padded.
fn pack(sampler: &Sampler, rng: &mut Rng, n_chunks: usize, context_length: usize) -> Vec<Vec<TokenId>> {
    let mut chunks = Vec::with_capacity(n_chunks);
    let mut cur: Vec<TokenId> = Vec::with_capacity(context_length);
    let finish = |cur: &mut Vec<TokenId>, chunks: &mut Vec<Vec<TokenId>>| {
        cur.resize(context_length, vocab::PAD);
        chunks.push(std::mem::replace(cur, Vec::with_capacity(context_length)));
    };
    while chunks.len() < n_chunks {
        let mut piece = sampler.sample(rng);
        piece.push(vocab::SEP);
        if piece.len() > context_length {
            if !cur.is_empty() {
                finish(&mut cur, &mut chunks);
                if chunks.len() == n_chunks {
                    break;
                }
            }
            piece.truncate(context_length);
            chunks.push(piece);
        } else if cur.len() + piece.len() <= context_length {
            cur.extend(piece);
        } else {
            finish(&mut cur, &mut chunks);
            cur = piece;
        }
    }
    chunks
}

/// Generates and splits one domain.
pub fn generate_domain(spec: &DomainSpec, context_length: usize) -> Result<DomainCorpus> {
    spec.validate()?;
    if context_length < 2 {
        return Err(CoopError::InvalidConfig("context_length must be at least 2".into()));
    }
    let sampler = Sampler::new(spec.kind);
    let mut gen_rng = rng::stream(spec.seed, &format!("corpus/{}", spec.kind));
    let chunks = pack(&sampler, &mut gen_rng, spec.n_chunks, context_length);

    let mut order: Vec<usize> = (0..spec.n_chunks).collect();
    order.shuffle(&mut rng::stream(spec.seed, &format!("split/{}", spec.name)));
    let mut is_heldout = vec![false; spec.n_chunks];
    for &i in &order[..spec.heldout_count()] {
        is_heldout[i] = true;
    }
    let mut train = PackedChunkSet {
        domain: spec.name.clone(),
        split: Split::Train,
        chunks: Vec::new(),
        origin: Vec::new(),
        source_index: Vec::new(),
    };
    let mut heldout = PackedChunkSet { split: Split::Heldout, ..train.clone() };
    for (i, chunk) in chunks.into_iter().enumerate() {
        let set = if is_heldout[i] { &mut heldout } else { &mut train };
        set.chunks.push(chunk);
        set.origin.push(spec.name.clone());
        set.source_index.push(i);
    }
    Ok(DomainCorpus { spec: spec.clone(), train, heldout })
}

/// Largest-remainder apportionment of `total` by `weights` (sum 1).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Seeded mixture of chunk sets.
///
/// The stream holds `round(Σ pᵢ·|setᵢ|)` chunks, apportioned to sources by
/// proportion and drawn without replacement, then shuffled.
pub fn mixed_stream(domains: &[&PackedChunkSet], proportions: &[f64], seed: u64) -> Result<PackedChunkSet> {
    let total = domains.iter().zip(proportions).map(|(d, p)| p * d.len() as f64).sum::<f64>().round();
    mixed_stream_sized(domains, proportions, total as usize, seed)
}

/// [`mixed_stream`] with an explicit total size.
pub fn mixed_stream_sized(
    domains: &[&PackedChunkSet],
    proportions: &[f64],
    total: usize,
    seed: u64,
) -> Result<PackedChunkSet> {
    if domains.is_empty() || domains.iter().all(|d| d.is_empty()) {
        return Err(CoopError::InvalidInput("mixed_stream needs at least one non-empty source".into()));
    }
    if proportions.len() != domains.len() {
        return Err(CoopError::InvalidInput(format!(
            "{} proportions for {} sources",
            proportions.len(),
            domains.len()
        )));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(CoopError::InvalidInput(format!("proportions must be non-negative and sum to 1 (got {sum})")));
    }
    let counts = apportion(proportions, total);
    let mut picked: Vec<(Vec<TokenId>, String, usize)> = Vec::with_capacity(total);
    for (i, (set, &count)) in domains.iter().zip(&counts).enumerate() {
        if count > set.len() {
            return Err(CoopError::InvalidInput(format!(
                "source `{}` has {} chunks, {count} requested",
                set.domain,
                set.len()
            )));
        }
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng::indexed_stream(seed, "mix/select", i as u64));
        for &j in &idx[..count] {
            picked.push((set.chunks[j].clone(), set.origin[j].clone(), set.source_index[j]));
        }
    }
    picked.shuffle(&mut rng::stream(seed, "mix/order"));
    let split = domains[0].split;
    let mut out = PackedChunkSet {
        domain: "mixed".to_string(),
        split,
        chunks: Vec::with_capacity(total),
        origin: Vec::with_capacity(total),
        source_index: Vec::with_capacity(total),
    };
    for (c, o, i) in picked {
        out.chunks.push(c);
        out.origin.push(o);
        out.source_index.push(i);
    }
    Ok(out)
}

/// Equal-proportion mixture of the train splits.
pub fn equal_mixture(corpora: &[DomainCorpus], total: usize, seed: u64) -> Result<PackedChunkSet> {
    let sets: Vec<&PackedChunkSet> = corpora.iter().map(|c| &c.train).collect();
    let p = vec![1.0 / sets.len().max(1) as f64; sets.len()];
    mixed_stream_sized(&sets, &p, total, seed)
}
