use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ini::{IniDocument, Section};
use crate::corpus::{vocab, DomainSpec, GeneratorKind};
use crate::error::{CoopError, Result};
use crate::fusion::{InputMode, RouterKind};
use crate::model::ModelConfig;

/// Cooperative-training knobs shared by every specialist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperativeSettings {
    pub specialist_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_depth: usize,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub base_seed: u64,
    /// Size of the pretraining and router mixtures.
    pub mixed_chunks: usize,
    /// Defaults to the summed specialist steps.
    pub monolithic_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSettings {
    pub kind: RouterKind,
    pub input_mode: InputMode,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Decoupled decay on the router weights; any decay bounds how sharp the
    /// gates can get.
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Baselines {
    pub monolithic: bool,
    pub weight_avg: bool,
    pub wider: bool,
    pub uniform: bool,
    pub oracle: bool,
    pub hard: bool,
    pub sparse: bool,
}

impl Baselines {
    pub fn all() -> Self {
        Self { monolithic: true, weight_avg: true, wider: true, uniform: true, oracle: true, hard: true, sparse: true }
    }
}

/// Width of the capacity-control model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiderSettings {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub domains: Vec<DomainSpec>,
    pub cooperative: CooperativeSettings,
    pub router: RouterSettings,
    pub baselines: Baselines,
    pub wider: WiderSettings,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn canonical_domains(n_chunks: usize) -> Vec<DomainSpec> {
    vec![
        DomainSpec::new("arithmetic", GeneratorKind::ArithmeticExpressions, 11, n_chunks),
        DomainSpec::new("brackets", GeneratorKind::BalancedBrackets, 12, n_chunks),
        DomainSpec::new("dialect", GeneratorKind::MarkovDialect(0), 13, n_chunks),
    ]
}

impl ExperimentConfig {
    /// Full desk-scale defaults: 4 layers, width 128, context 128, 2,000-step
    /// specialists. Hours of single-core compute.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            model: ModelConfig::default(),
            domains: canonical_domains(1000),
            cooperative: CooperativeSettings {
                specialist_steps: 2000,
                batch_size: 8,
                lr: 2e-4,
                freeze_depth: 1,
                pretrain_steps: 200,
                pretrain_lr: 2e-4,
                base_seed: 1,
                mixed_chunks: 600,
                monolithic_steps: None,
            },
            router: RouterSettings {
                kind: RouterKind::Mlp2,
                input_mode: InputMode::BaseHidden,
                steps: 500,
                lr: 3e-2,
                batch_size: 8,
                weight_decay: 0.0,
            },
            baselines: Baselines::all(),
            wider: WiderSettings { n_layers: 4, hidden_dim: 256, n_heads: 4 },
            seeds: vec![42, 137, 2026],
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Reduced preset that finishes in minutes on one core.
    pub fn ci() -> Self {
        Self {
            name: "ci".into(),
            model: ModelConfig {
                n_layers: 2,
                hidden_dim: 32,
                n_heads: 4,
                vocab_size: vocab::VOCAB_SIZE,
                context_length: 32,
                freeze_depth: 1,
            },
            cooperative: CooperativeSettings {
                specialist_steps: 500,
                lr: 2e-3,
                pretrain_steps: 100,
                pretrain_lr: 2e-3,
                ..Self::desk().cooperative
            },
            wider: WiderSettings { n_layers: 2, hidden_dim: 64, n_heads: 4 },
            output_dir: PathBuf::from("runs/ci"),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "ci" => Ok(Self::ci()),
            other => Err(CoopError::InvalidConfig(format!("unknown preset `{other}` (expected desk or ci)"))),
        }
    }

    pub fn wide_model(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.wider.n_layers,
            hidden_dim: self.wider.hidden_dim,
            n_heads: self.wider.n_heads,
            freeze_depth: 0,
            ..self.model
        }
    }

    pub fn monolithic_steps(&self) -> u64 {
        self.cooperative
            .monolithic_steps
            .unwrap_or(self.cooperative.specialist_steps * self.domains.len() as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoopError::InvalidConfig(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) || self.name.starts_with('.') {
            return bad(format!("experiment name `{}` is not filesystem-safe", self.name));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        self.model.validate()?;
        if self.model.vocab_size != vocab::VOCAB_SIZE {
            return bad(format!("vocab_size must be {} (the shared symbol vocabulary)", vocab::VOCAB_SIZE));
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate()?;
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return bad(format!("duplicate domain name `{}`", d.name));
            }
        }
        let c = &self.cooperative;
        if c.freeze_depth > self.model.n_layers {
            return bad(format!("freeze_depth {} exceeds n_layers {}", c.freeze_depth, self.model.n_layers));
        }
        if c.batch_size == 0 || self.router.batch_size == 0 || c.mixed_chunks == 0 {
            return bad("batch sizes and mixed_chunks must be positive".into());
        }
        for (name, lr) in [("lr", c.lr), ("pretrain_lr", c.pretrain_lr), ("router lr", self.router.lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.router.weight_decay.is_finite() && self.router.weight_decay >= 0.0) {
            return bad("router weight_decay must be non-negative".into());
        }
        self.wide_model().validate()?;
        Ok(())
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let doc = IniDocument::parse(text)?;
        let root = doc.section("").expect("root section");
        root.check_keys(&["name", "preset", "seeds", "output_dir"])?;
        let mut cfg = match root.get("preset") {
            Some(e) => Self::preset(&e.value).map_err(|err| CoopError::Parse { line: e.line, message: err.to_string() })?,
            None => Self::ci(),
        };
        if let Some(v) = root.get("name") {
            cfg.name = v.value.clone();
        }
        if let Some(v) = root.parse_list::<u64>("seeds")? {
            cfg.seeds = v;
        }
        if let Some(v) = root.get("output_dir") {
            cfg.output_dir = PathBuf::from(&v.value);
        }
        let mut domains = Vec::new();
        for sec in &doc.sections {
            match sec.name.as_str() {
                "" => {}
                "model" => apply_model(sec, &mut cfg.model)?,
                "cooperative" => apply_cooperative(sec, &mut cfg.cooperative)?,
                "router" => apply_router(sec, &mut cfg.router)?,
                "baselines" => apply_baselines(sec, &mut cfg.baselines)?,
                "wider" => {
                    sec.check_keys(&["n_layers", "hidden_dim", "n_heads"])?;
                    set(&mut cfg.wider.n_layers, sec.parse_value("n_layers")?);
                    set(&mut cfg.wider.hidden_dim, sec.parse_value("hidden_dim")?);
                    set(&mut cfg.wider.n_heads, sec.parse_value("n_heads")?);
                }
                name => match name.strip_prefix("domain.") {
                    Some(dname) => domains.push(parse_domain(sec, dname)?),
                    None => {
                        return Err(CoopError::Parse { line: sec.line, message: format!("unknown section `[{name}]`") })
                    }
                },
            }
        }
        if !domains.is_empty() {
            cfg.domains = domains;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Complete config as text; `from_ini(to_ini())` reproduces it.
    pub fn to_ini(&self) -> String {
        let m = &self.model;
        let c = &self.cooperative;
        let r = &self.router;
        let b = &self.baselines;
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut out = format!(
            "name = {}\nseeds = {}\noutput_dir = {}\n\n[model]\nn_layers = {}\nhidden_dim = {}\nn_heads = {}\nvocab_size = {}\ncontext_length = {}\nfreeze_depth = {}\n\n",
            self.name,
            seeds.join(", "),
            self.output_dir.display(),
            m.n_layers,
            m.hidden_dim,
            m.n_heads,
            m.vocab_size,
            m.context_length,
            m.freeze_depth
        );
        out.push_str(&format!(
            "[cooperative]\nspecialist_steps = {}\nbatch_size = {}\nlr = {}\nfreeze_depth = {}\npretrain_steps = {}\npretrain_lr = {}\nbase_seed = {}\nmixed_chunks = {}\n",
            c.specialist_steps, c.batch_size, c.lr, c.freeze_depth, c.pretrain_steps, c.pretrain_lr, c.base_seed, c.mixed_chunks
        ));
        if let Some(s) = c.monolithic_steps {
            out.push_str(&format!("monolithic_steps = {s}\n"));
        }
        out.push_str(&format!(
            "\n[router]\nkind = {}\ninput_mode = {}\nsteps = {}\nlr = {}\nbatch_size = {}\nweight_decay = {}\n\n",
            r.kind, r.input_mode, r.steps, r.lr, r.batch_size, r.weight_decay
        ));
        out.push_str(&format!(
            "[baselines]\nmonolithic = {}\nweight_avg = {}\nwider = {}\nuniform = {}\noracle = {}\nhard = {}\nsparse = {}\n\n",
            b.monolithic, b.weight_avg, b.wider, b.uniform, b.oracle, b.hard, b.sparse
        ));
        out.push_str(&format!(
            "[wider]\nn_layers = {}\nhidden_dim = {}\nn_heads = {}\n",
            self.wider.n_layers, self.wider.hidden_dim, self.wider.n_heads
        ));
        for d in &self.domains {
            out.push_str(&format!(
                "\n[domain.{}]\nkind = {}\nseed = {}\nn_chunks = {}\nholdout_fraction = {}\n",
                d.name, d.kind, d.seed, d.n_chunks, d.holdout_fraction
            ));
        }
        out
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_model(sec: &Section, m: &mut ModelConfig) -> Result<()> {
    sec.check_keys(&["n_layers", "hidden_dim", "n_heads", "vocab_size", "context_length", "freeze_depth"])?;
    set(&mut m.n_layers, sec.parse_value("n_layers")?);
    set(&mut m.hidden_dim, sec.parse_value("hidden_dim")?);
    set(&mut m.n_heads, sec.parse_value("n_heads")?);
    set(&mut m.vocab_size, sec.parse_value("vocab_size")?);
    set(&mut m.context_length, sec.parse_value("context_length")?);
    set(&mut m.freeze_depth, sec.parse_value("freeze_depth")?);
    Ok(())
}

fn apply_cooperative(sec: &Section, c: &mut CooperativeSettings) -> Result<()> {
    sec.check_keys(&[
        "specialist_steps",
        "batch_size",
        "lr",
        "freeze_depth",
        "pretrain_steps",
        "pretrain_lr",
        "base_seed",
        "mixed_chunks",
        "monolithic_steps",
    ])?;
    set(&mut c.specialist_steps, sec.parse_value("specialist_steps")?);
    set(&mut c.batch_size, sec.parse_value("batch_size")?);
    set(&mut c.lr, sec.parse_value("lr")?);
    set(&mut c.freeze_depth, sec.parse_value("freeze_depth")?);
    set(&mut c.pretrain_steps, sec.parse_value("pretrain_steps")?);
    set(&mut c.pretrain_lr, sec.parse_value("pretrain_lr")?);
    set(&mut c.base_seed, sec.parse_value("base_seed")?);
    set(&mut c.mixed_chunks, sec.parse_value("mixed_chunks")?);
    if let Some(v) = sec.parse_value::<u64>("monolithic_steps")? {
        c.monolithic_steps = Some(v);
    }
    Ok(())
}

fn apply_router(sec: &Section, r: &mut RouterSettings) -> Result<()> {
    sec.check_keys(&["kind", "input_mode", "steps", "lr", "batch_size", "weight_decay"])?;
    set(&mut r.kind, sec.parse_value("kind")?);
    set(&mut r.input_mode, sec.parse_value("input_mode")?);
    set(&mut r.steps, sec.parse_value("steps")?);
    set(&mut r.lr, sec.parse_value("lr")?);
    set(&mut r.batch_size, sec.parse_value("batch_size")?);
    set(&mut r.weight_decay, sec.parse_value("weight_decay")?);
    Ok(())
}

fn apply_baselines(sec: &Section, b: &mut Baselines) -> Result<()> {
    sec.check_keys(&["monolithic", "weight_avg", "wider", "uniform", "oracle", "hard", "sparse"])?;
    set(&mut b.monolithic, sec.parse_value("monolithic")?);
    set(&mut b.weight_avg, sec.parse_value("weight_avg")?);
    set(&mut b.wider, sec.parse_value("wider")?);
    set(&mut b.uniform, sec.parse_value("uniform")?);
    set(&mut b.oracle, sec.parse_value("oracle")?);
    set(&mut b.hard, sec.parse_value("hard")?);
    set(&mut b.sparse, sec.parse_value("sparse")?);
    Ok(())
}

fn parse_domain(sec: &Section, name: &str) -> Result<DomainSpec> {
    sec.check_keys(&["kind", "seed", "n_chunks", "holdout_fraction"])?;
    let need = |key: &str| CoopError::Parse { line: sec.line, message: format!("[{}] is missing `{key}`", sec.name) };
    let kind: GeneratorKind = sec.parse_value("kind")?.ok_or_else(|| need("kind"))?;
    let mut d = DomainSpec::new(
        name,
        kind,
        sec.parse_value("seed")?.ok_or_else(|| need("seed"))?,
        sec.parse_value("n_chunks")?.ok_or_else(|| need("n_chunks"))?,
    );
    set(&mut d.holdout_fraction, sec.parse_value("holdout_fraction")?);
    Ok(d)
}
