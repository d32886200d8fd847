use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::derive_seed;
use super::results::{aggregate, ResultsWriter, RunManifest, AGGREGATE_FILE};
use crate::corpus::{equal_mixture, generate_domain, mixed_stream_sized, DomainCorpus, PackedChunkSet};
use crate::error::{CoopError, Result};
use crate::evaluation::{
    self, cross_domain_matrix, equal_weight, improvement, per_domain_losses, EvalReport, LanguageModel, LossMatrix,
    RoutingStats,
};
use crate::fusion::{
    self, average_checkpoints, domain_gates, oracle_from_matrix, sparse_agreement, FusedManifest, FusedModel,
    FusionMode, Router, RouterKind,
};
use crate::model::Checkpoint;
use crate::protocol::{
    make_base, train_monolithic, train_specialist, train_wider, BaseGuard, SpecialistJob, TrainSettings, TrainedModel,
};

/// Tokens whose largest gate is at least this are treated as saturated.
pub const SATURATION_GATE: f64 = 0.99;

/// Seed-independent inputs: corpora, held-out sets and the shared base.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpora: Vec<DomainCorpus>,
    pub heldout: Vec<PackedChunkSet>,
    pub base: Checkpoint,
    pub base_losses: BTreeMap<String, f64>,
    pub base_ew: f64,
}

impl Prepared {
    pub fn domain_names(&self) -> Vec<String> {
        self.corpora.iter().map(|c| c.spec.name.clone()).collect()
    }
}

pub fn generate_corpora(cfg: &ExperimentConfig) -> Result<Vec<DomainCorpus>> {
    cfg.domains.iter().map(|d| generate_domain(d, cfg.model.context_length)).collect()
}

/// Base pretrained for `pretrain_steps` on the equal mixture.
pub fn build_base(cfg: &ExperimentConfig, corpora: &[DomainCorpus], pretrain_steps: u64) -> Result<Checkpoint> {
    let c = &cfg.cooperative;
    let mixed = equal_mixture(corpora, c.mixed_chunks, derive_seed(c.base_seed, "pretrain-mix", 0))?;
    let settings = TrainSettings::new(pretrain_steps, c.batch_size, c.pretrain_lr, c.base_seed);
    make_base(cfg.model, pretrain_steps, &mixed, c.base_seed, &settings)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpora = generate_corpora(cfg)?;
    let base = build_base(cfg, &corpora, cfg.cooperative.pretrain_steps)?;
    Prepared::assemble(corpora, base)
}

impl Prepared {
    /// Corpora from the config with an externally supplied base.
    pub fn from_base(cfg: &ExperimentConfig, base: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        Self::assemble(generate_corpora(cfg)?, base)
    }

    fn assemble(corpora: Vec<DomainCorpus>, base: Checkpoint) -> Result<Self> {
        let heldout: Vec<PackedChunkSet> = corpora.iter().map(|c| c.heldout.clone()).collect();
        let base_losses = per_domain_losses(&base, &heldout)?;
        let base_ew = equal_weight(&base_losses)?;
        Ok(Prepared { corpora, heldout, base, base_losses, base_ew })
    }
}

/// Overrides for one contributor's training job.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum JobOverride {
    BatchSize(usize),
    Lr(f64),
    Steps(u64),
}

pub fn specialist_jobs(cfg: &ExperimentConfig, seed: u64) -> Vec<SpecialistJob> {
    let c = &cfg.cooperative;
    cfg.domains
        .iter()
        .enumerate()
        .map(|(i, d)| SpecialistJob {
            domain: d.name.clone(),
            steps: c.specialist_steps,
            batch_size: c.batch_size,
            lr: c.lr,
            seed: derive_seed(seed, "specialist", i as u64),
        })
        .collect()
}

fn apply_override(job: &mut SpecialistJob, o: JobOverride) {
    match o {
        JobOverride::BatchSize(b) => job.batch_size = b,
        JobOverride::Lr(lr) => job.lr = lr,
        JobOverride::Steps(s) => job.steps = s,
    }
}

/// Trains one specialist per job, each from `bases[i]` when several bases are
/// supplied and from `bases[0]` otherwise.
pub fn train_specialists(
    prepared: &Prepared,
    bases: &[&Checkpoint],
    jobs: &[SpecialistJob],
    freeze_depth: usize,
    guard: BaseGuard,
) -> Result<Vec<TrainedModel>> {
    jobs.iter()
        .enumerate()
        .map(|(i, job)| {
            let base = bases.get(i).or(bases.first()).expect("at least one base");
            let corpus = prepared
                .corpora
                .iter()
                .find(|c| c.spec.name == job.domain)
                .ok_or_else(|| CoopError::InvalidInput(format!("no corpus for domain `{}`", job.domain)))?;
            train_specialist(base, guard, &corpus.train, &job.settings(), freeze_depth, None)
        })
        .collect()
}

/// Router trained on an equal mixture of the given domains' train splits.
pub fn fit_router(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    specialists: &[Checkpoint],
    domains: &[usize],
    seed: u64,
) -> Result<Router> {
    let hidden = specialists[0].config().hidden_dim;
    if cfg.router.kind == RouterKind::Uniform || specialists.len() == 1 {
        return Ok(Router::uniform(specialists.len(), hidden));
    }
    let covered: Vec<DomainCorpus> = domains.iter().map(|&i| prepared.corpora[i].clone()).collect();
    let mixed = equal_mixture(&covered, cfg.cooperative.mixed_chunks, derive_seed(seed, "router-mix", 0))?;
    let r = &cfg.router;
    let settings = TrainSettings {
        weight_decay: r.weight_decay,
        ..TrainSettings::new(r.steps, r.batch_size, r.lr, derive_seed(seed, "router", 0))
    };
    fusion::train_router(specialists, Some(&prepared.base), r.kind, r.input_mode, &mixed, &settings)
}

pub fn fuse(prepared: &Prepared, specialists: Vec<Checkpoint>, router: Router) -> Result<FusedModel> {
    FusedModel::new(specialists, router, FusionMode::Soft, Some(prepared.base.clone()))
}

/// Everything one seed of the cooperative protocol produces.
#[derive(Debug, Clone)]
pub struct CoreArtifacts {
    pub seed: u64,
    pub specialists: Vec<TrainedModel>,
    pub fused: FusedModel,
}

impl CoreArtifacts {
    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        self.specialists.iter().map(|s| s.ckpt.clone()).collect()
    }
}

pub fn train_cooperative(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<CoreArtifacts> {
    train_cooperative_with(cfg, prepared, seed, &[])
}

pub fn train_cooperative_with(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    overrides: &[(usize, JobOverride)],
) -> Result<CoreArtifacts> {
    let mut jobs = specialist_jobs(cfg, seed);
    for &(i, o) in overrides {
        let job = jobs
            .get_mut(i)
            .ok_or_else(|| CoopError::InvalidInput(format!("no specialist {i} to override")))?;
        apply_override(job, o);
    }
    let guard = BaseGuard::Verify(prepared.base.digest());
    let specialists = train_specialists(prepared, &[&prepared.base], &jobs, cfg.cooperative.freeze_depth, guard)?;
    let ckpts: Vec<Checkpoint> = specialists.iter().map(|s| s.ckpt.clone()).collect();
    let all: Vec<usize> = (0..ckpts.len()).collect();
    let router = fit_router(cfg, prepared, &ckpts, &all, seed)?;
    let fused = fuse(prepared, ckpts, router)?;
    Ok(CoreArtifacts { seed, specialists, fused })
}

/// Gate statistics plus the saturation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub stats: RoutingStats,
    /// Mass each domain puts on its own specialist.
    pub matching_mass: BTreeMap<String, f64>,
    /// Largest mass any domain puts on another domain's specialist.
    pub confusion: f64,
    pub tokens: usize,
    pub unsaturated_tokens: usize,
}

impl GateSummary {
    pub fn saturated(&self) -> bool {
        self.unsaturated_tokens == 0
    }
}

/// Gate summary where specialist `i` is the expert for `heldout[i]`.
pub fn gate_summary(fm: &FusedModel, heldout: &[PackedChunkSet]) -> Result<GateSummary> {
    let gates = heldout.iter().map(|h| domain_gates(fm, h)).collect::<Result<Vec<_>>>()?;
    let (mut tokens, mut unsaturated) = (0, 0);
    for g in &gates {
        for p in &g.prompts {
            let n = p.dims2().map(|(_, n)| n).unwrap_or(1);
            for row in p.data().chunks(n) {
                tokens += 1;
                if row.iter().copied().fold(f64::NEG_INFINITY, f64::max) < SATURATION_GATE {
                    unsaturated += 1;
                }
            }
        }
    }
    let stats = evaluation::routing_stats(&gates)?;
    let mut matching_mass = BTreeMap::new();
    let mut confusion: f64 = 0.0;
    for (i, h) in heldout.iter().enumerate() {
        let mass = &stats.per_domain_gate_mass[&h.domain];
        matching_mass.insert(h.domain.clone(), mass.get(i).copied().unwrap_or(0.0));
        for (j, m) in mass.iter().enumerate() {
            if j != i {
                confusion = confusion.max(*m);
            }
        }
    }
    Ok(GateSummary { stats, matching_mass, confusion, tokens, unsaturated_tokens: unsaturated })
}

/// Headline numbers for one seed of `run_core`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub base_ew: f64,
    pub divergence_pct: BTreeMap<String, f64>,
    pub diagonally_dominant: bool,
    pub best_specialist_ew: f64,
    pub fused_ew: f64,
    pub fused_gain_pct: f64,
    pub gates: GateSummary,
    pub hard_ew: Option<f64>,
    pub sparse_ew: Option<f64>,
    pub sparse_agreement_pct: Option<f64>,
    pub oracle_ew: Option<f64>,
    pub oracle_assignment: Option<BTreeMap<String, usize>>,
    pub uniform_ew: Option<f64>,
    pub weight_avg_ew: Option<f64>,
    pub monolithic_ew: Option<f64>,
    pub wider_ew: Option<f64>,
}

/// In-memory result of [`run_core_detailed`].
#[derive(Debug, Clone)]
pub struct CoreRun {
    pub manifest: RunManifest,
    pub summaries: Vec<SeedSummary>,
    pub reports: BTreeMap<u64, Vec<EvalReport>>,
}

pub fn run_core(cfg: &ExperimentConfig) -> Result<RunManifest> {
    Ok(run_core_detailed(cfg)?.manifest)
}

/// Base → specialists → router → every configured baseline, for each seed.
/// A failing seed is recorded in the manifest and the others still run.
pub fn run_core_detailed(cfg: &ExperimentConfig) -> Result<CoreRun> {
    cfg.validate()?;
    let mut w = ResultsWriter::create(&cfg.output_dir, &cfg.name, "core", cfg.to_ini(), &cfg.seeds)?;
    w.write_text("config.ini", &cfg.to_ini())?;
    let t = Instant::now();
    let prepared = prepare(cfg)?;
    w.record_timing("prepare", t);
    w.write_checkpoint("base.ckpt", "base", &prepared.base)?;
    let mut summaries = Vec::new();
    let mut reports = BTreeMap::new();
    for &seed in &cfg.seeds {
        let t = Instant::now();
        match core_seed(cfg, &prepared, seed, &mut w) {
            Ok((summary, rs)) => {
                w.write_json(&format!("seed_{seed}/summary.json"), &summary)?;
                summaries.push(summary);
                reports.insert(seed, rs);
            }
            Err(e) => w.record_error(&format!("seed {seed}"), &e),
        }
        w.record_timing(&format!("seed_{seed}"), t);
    }
    w.write_json(AGGREGATE_FILE, &aggregate(&reports))?;
    let manifest = w.finish()?;
    Ok(CoreRun { manifest, summaries, reports })
}

fn core_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    w: &mut ResultsWriter,
) -> Result<(SeedSummary, Vec<EvalReport>)> {
    let dir = format!("seed_{seed}");
    let t = Instant::now();
    let art = train_cooperative(cfg, prepared, seed)?;
    w.record_timing(&format!("{dir}/cooperative"), t);
    let names = prepared.domain_names();
    let ckpts = art.checkpoints();
    for (name, s) in names.iter().zip(&art.specialists) {
        w.write_checkpoint(&format!("{dir}/ckpt/specialist_{name}.ckpt"), &format!("{dir}/specialist_{name}"), &s.ckpt)?;
        w.write_json(&format!("{dir}/logs/specialist_{name}.json"), &s.log)?;
    }
    let manifest = FusedManifest {
        mode: FusionMode::Soft,
        router: art.fused.router().clone(),
        specialists: names
            .iter()
            .zip(&ckpts)
            .map(|(n, c)| (c.digest(), Some(format!("ckpt/specialist_{n}.ckpt"))))
            .collect(),
        base: Some((prepared.base.digest(), Some("../base.ckpt".into()))),
    };
    w.write_text(&format!("{dir}/fused.manifest"), &manifest.to_text())?;

    let models: Vec<(String, &dyn LanguageModel)> =
        names.iter().zip(&ckpts).map(|(n, c)| (n.clone(), c as &dyn LanguageModel)).collect();
    let matrix = cross_domain_matrix(&models, &prepared.heldout)?;
    w.write_text(&format!("{dir}/cross_domain.csv"), &matrix.to_csv())?;
    let spec_ew: Vec<f64> = matrix.values.iter().map(|row| evaluation::mean(row.iter().copied())).collect();
    let best_ew = spec_ew.iter().copied().fold(f64::INFINITY, f64::min);
    let digest = prepared.base.digest().to_hex();
    let report = |label: &str, losses: BTreeMap<String, f64>| EvalReport::new(label, losses, prepared.base_ew, best_ew, &digest);

    let mut reports = vec![report("base", prepared.base_losses.clone())?];
    for (i, name) in names.iter().enumerate() {
        reports.push(report(&format!("specialist_{name}"), row_losses(&matrix, i))?);
    }
    let divergence_pct = names
        .iter()
        .enumerate()
        .map(|(i, n)| Ok((n.clone(), improvement(prepared.base_losses[n], matrix.values[i][i])?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let gates = gate_summary(&art.fused, &prepared.heldout)?;
    let fused = report("fused", per_domain_losses(&art.fused, &prepared.heldout)?)?.with_routing(gates.stats.clone());
    let fused_ew = fused.ew_loss;
    let fused_gain = fused.vs_best_specialist_pct;
    reports.push(fused);

    let b = cfg.baselines;
    let mut summary = SeedSummary {
        seed,
        base_ew: prepared.base_ew,
        divergence_pct,
        diagonally_dominant: matrix.diagonally_dominant(),
        best_specialist_ew: best_ew,
        fused_ew,
        fused_gain_pct: fused_gain,
        gates,
        hard_ew: None,
        sparse_ew: None,
        sparse_agreement_pct: None,
        oracle_ew: None,
        oracle_assignment: None,
        uniform_ew: None,
        weight_avg_ew: None,
        monolithic_ew: None,
        wider_ew: None,
    };
    let mut push = |r: EvalReport, slot: &mut Option<f64>| {
        *slot = Some(r.ew_loss);
        reports.push(r);
    };
    if b.hard {
        let hard = art.fused.with_mode(FusionMode::Hard);
        push(report("fused_hard", per_domain_losses(&hard, &prepared.heldout)?)?, &mut summary.hard_ew);
    }
    if b.sparse {
        let sparse = art.fused.with_mode(FusionMode::SparseTop1);
        push(report("fused_sparse", per_domain_losses(&sparse, &prepared.heldout)?)?, &mut summary.sparse_ew);
        summary.sparse_agreement_pct = Some(sparse_agreement(&art.fused, &prepared.heldout)?);
    }
    if b.oracle {
        let oracle = oracle_from_matrix(&matrix)?;
        let losses = names.iter().map(|n| (n.clone(), matrix.values[oracle.assignment[n]][names_index(&names, n)])).collect();
        push(report("oracle", losses)?, &mut summary.oracle_ew);
        summary.oracle_assignment = Some(oracle.assignment);
    }
    if b.uniform {
        let hidden = cfg.model.hidden_dim;
        let uniform = art.fused.with_router(Router::uniform(ckpts.len(), hidden))?;
        push(report("uniform", per_domain_losses(&uniform, &prepared.heldout)?)?, &mut summary.uniform_ew);
    }
    if b.weight_avg {
        let avg = average_checkpoints(&ckpts)?;
        push(report("weight_avg", per_domain_losses(&avg, &prepared.heldout)?)?, &mut summary.weight_avg_ew);
    }
    if b.monolithic || b.wider {
        let sets: Vec<&PackedChunkSet> = prepared.corpora.iter().map(|c| &c.train).collect();
        let total = sets.iter().map(|s| s.len()).min().unwrap_or(0) * sets.len();
        let p = vec![1.0 / sets.len() as f64; sets.len()];
        let mix = mixed_stream_sized(&sets, &p, total, derive_seed(seed, "monolithic-mix", 0))?;
        let c = &cfg.cooperative;
        if b.monolithic {
            let t = Instant::now();
            let settings = TrainSettings::new(cfg.monolithic_steps(), c.batch_size, c.lr, derive_seed(seed, "monolithic", 0));
            let guard = BaseGuard::Verify(prepared.base.digest());
            let mono = train_monolithic(&prepared.base, guard, &mix, &settings, c.freeze_depth, None)?;
            w.record_timing(&format!("{dir}/monolithic"), t);
            w.write_checkpoint(&format!("{dir}/ckpt/monolithic.ckpt"), &format!("{dir}/monolithic"), &mono.ckpt)?;
            push(report("monolithic", per_domain_losses(&mono.ckpt, &prepared.heldout)?)?, &mut summary.monolithic_ew);
        }
        if b.wider {
            let t = Instant::now();
            let settings = TrainSettings::new(cfg.monolithic_steps(), c.batch_size, c.lr, derive_seed(seed, "wider", 0));
            let wide = train_wider(cfg.wide_model(), &cfg.model, &mix, &settings)?;
            w.record_timing(&format!("{dir}/wider"), t);
            w.write_checkpoint(&format!("{dir}/ckpt/wider.ckpt"), &format!("{dir}/wider"), &wide)?;
            push(report("wider", per_domain_losses(&wide, &prepared.heldout)?)?, &mut summary.wider_ew);
        }
    }
    for r in &reports {
        w.write_report(seed, r)?;
    }
    Ok((summary, reports))
}

fn names_index(names: &[String], n: &str) -> usize {
    names.iter().position(|x| x == n).expect("known domain")
}

fn row_losses(matrix: &LossMatrix, row: usize) -> BTreeMap<String, f64> {
    matrix.domains.iter().cloned().zip(matrix.values[row].iter().copied()).collect()
}

/// Fused EW loss, its gain over the base, over the best specialist, and the
/// gate summary, for a finished cooperative run.
fn score(prepared: &Prepared, art: &CoreArtifacts) -> Result<(f64, f64, f64, GateSummary)> {
    let ew = equal_weight(&per_domain_losses(&art.fused, &prepared.heldout)?)?;
    let best = art
        .specialists
        .iter()
        .map(|s| equal_weight(&per_domain_losses(&s.ckpt, &prepared.heldout)?))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let gates = gate_summary(&art.fused, &prepared.heldout)?;
    Ok((ew, improvement(prepared.base_ew, ew)?, improvement(best, ew)?, gates))
}

fn sweep_writer(cfg: &ExperimentConfig, suite: &str) -> Result<ResultsWriter> {
    cfg.validate()?;
    let mut w = ResultsWriter::create(&cfg.output_dir, &cfg.name, suite, cfg.to_ini(), &cfg.seeds)?;
    w.write_text("config.ini", &cfg.to_ini())?;
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverCell {
    pub steps: u64,
    pub freeze_depth: usize,
    pub seed: u64,
    pub fused_ew: f64,
    pub gain_vs_base_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverTable {
    pub cells: Vec<CrossoverCell>,
    /// Per step count, the freeze depth with the highest mean gain.
    pub leaders: Vec<(u64, usize)>,
}

impl CrossoverTable {
    pub fn mean_gain(&self, steps: u64, freeze_depth: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.steps == steps && c.freeze_depth == freeze_depth)
            .map(|c| c.gain_vs_base_pct)
            .collect();
        (!v.is_empty()).then(|| evaluation::mean(v))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("steps,freeze_depth,seed,fused_ew,gain_vs_base_pct,leader\n");
        for c in &self.cells {
            let leader = self.leaders.contains(&(c.steps, c.freeze_depth));
            out.push_str(&format!("{},{},{},{},{},{}\n", c.steps, c.freeze_depth, c.seed, c.fused_ew, c.gain_vs_base_pct, leader));
        }
        out
    }
}

/// Cooperative run for one grid cell: specialist steps × freeze depth.
pub fn crossover_cell(cfg: &ExperimentConfig, prepared: &Prepared, steps: u64, k: usize, seed: u64) -> Result<CrossoverCell> {
    let mut c = cfg.clone();
    c.cooperative.specialist_steps = steps;
    c.cooperative.freeze_depth = k;
    c.validate()?;
    let art = train_cooperative(&c, prepared, seed)?;
    let (fused_ew, gain, _, _) = score(prepared, &art)?;
    Ok(CrossoverCell { steps, freeze_depth: k, seed, fused_ew, gain_vs_base_pct: gain })
}

pub fn run_crossover(cfg: &ExperimentConfig, step_grid: &[u64], freeze_grid: &[usize]) -> Result<CrossoverTable> {
    run_grid(cfg, step_grid, freeze_grid, "crossover")
}

/// Freeze-depth sweep at the configured step count.
pub fn run_freeze_sweep(cfg: &ExperimentConfig, freeze_grid: &[usize]) -> Result<CrossoverTable> {
    run_grid(cfg, &[cfg.cooperative.specialist_steps], freeze_grid, "freeze")
}

fn run_grid(cfg: &ExperimentConfig, step_grid: &[u64], freeze_grid: &[usize], suite: &str) -> Result<CrossoverTable> {
    if step_grid.is_empty() || freeze_grid.is_empty() {
        return Err(CoopError::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let mut w = sweep_writer(cfg, suite)?;
    let prepared = prepare(cfg)?;
    let mut cells = Vec::new();
    for &steps in step_grid {
        for &k in freeze_grid {
            for &seed in &cfg.seeds {
                let t = Instant::now();
                cells.push(crossover_cell(cfg, &prepared, steps, k, seed)?);
                w.record_timing(&format!("steps_{steps}/k_{k}/seed_{seed}"), t);
            }
        }
    }
    let mut table = CrossoverTable { cells, leaders: Vec::new() };
    for &steps in step_grid {
        let gains: Vec<f64> = freeze_grid.iter().map(|&k| table.mean_gain(steps, k).unwrap_or(f64::NEG_INFINITY)).collect();
        table.leaders.push((steps, freeze_grid[coop_numerics::argmax(&gains)]));
    }
    w.write_text(&format!("{suite}.csv"), &table.to_csv())?;
    w.write_json(&format!("{suite}.json"), &table)?;
    w.finish()?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub seed: u64,
    pub fused_ew: f64,
    pub gain_vs_best_specialist_pct: f64,
    pub per_domain_loss: BTreeMap<String, f64>,
}

/// Fuses the first N specialists and scores on all D domains against the
/// best of all D specialists.
pub fn run_scaling(cfg: &ExperimentConfig, n_grid: &[usize]) -> Result<Vec<ScalingRow>> {
    let d = cfg.domains.len();
    if n_grid.is_empty() || n_grid.iter().any(|&n| n == 0 || n > d) {
        return Err(CoopError::InvalidConfig(format!("scaling grid values must lie in 1..={d}")));
    }
    let mut w = sweep_writer(cfg, "scaling")?;
    let prepared = prepare(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let jobs = specialist_jobs(cfg, seed);
        let guard = BaseGuard::Verify(prepared.base.digest());
        let trained = train_specialists(&prepared, &[&prepared.base], &jobs, cfg.cooperative.freeze_depth, guard)?;
        let ckpts: Vec<Checkpoint> = trained.into_iter().map(|t| t.ckpt).collect();
        let best = ckpts
            .iter()
            .map(|c| equal_weight(&per_domain_losses(c, &prepared.heldout)?))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        for &n in n_grid {
            let subset = ckpts[..n].to_vec();
            let covered: Vec<usize> = (0..n).collect();
            let router = fit_router(cfg, &prepared, &subset, &covered, seed)?;
            let fm = fuse(&prepared, subset, router)?;
            let losses = per_domain_losses(&fm, &prepared.heldout)?;
            let ew = equal_weight(&losses)?;
            rows.push(ScalingRow {
                n,
                seed,
                fused_ew: ew,
                gain_vs_best_specialist_pct: improvement(best, ew)?,
                per_domain_loss: losses,
            });
        }
    }
    let mut csv = String::from("n,seed,fused_ew,gain_vs_best_specialist_pct\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.n, r.seed, r.fused_ew, r.gain_vs_best_specialist_pct));
    }
    w.write_text("scaling.csv", &csv)?;
    w.write_json("scaling.json", &rows)?;
    w.finish()?;
    Ok(rows)
}

/// Pretraining steps of the base each specialist starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitCondition {
    pub label: String,
    pub pretrain_steps: Vec<u64>,
}

impl InitCondition {
    pub fn matched(p: u64, n: usize) -> Self {
        Self { label: "matched".into(), pretrain_steps: vec![p; n] }
    }

    /// First specialist's base trails the reference by `gap`, the last leads
    /// it by `gap`, the rest share the reference.
    pub fn with_gap(label: &str, p: u64, n: usize, gap: u64) -> Self {
        let mut steps = vec![p; n];
        if n > 0 {
            steps[0] = p.saturating_sub(gap);
        }
        if n > 1 {
            steps[n - 1] = p + gap;
        }
        Self { label: label.into(), pretrain_steps: steps }
    }

    pub fn is_matched(&self) -> bool {
        self.pretrain_steps.windows(2).all(|w| w[0] == w[1])
    }
}

/// Matched, small-gap (±20%) and large-gap (−50%, +100%) conditions.
pub fn default_init_conditions(p: u64, n: usize) -> Vec<InitCondition> {
    let mut large = InitCondition::with_gap("large_gap", p, n, p / 2);
    if n > 1 {
        large.pretrain_steps[n - 1] = 2 * p;
    }
    vec![InitCondition::matched(p, n), InitCondition::with_gap("small_gap", p, n, p / 5), large]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConditionResult {
    pub label: String,
    pub pretrain_steps: Vec<u64>,
    pub seed: u64,
    pub fused_ew: f64,
    pub gain_vs_best_specialist_pct: f64,
    pub gates: GateSummary,
}

/// Shared-initialization ablation. Specialists from different bases are
/// refused unless `allow_mismatch` is set.
pub fn run_shared_init_ablation(
    cfg: &ExperimentConfig,
    conditions: &[InitCondition],
    allow_mismatch: bool,
) -> Result<Vec<InitConditionResult>> {
    let d = cfg.domains.len();
    if conditions.iter().any(|c| c.pretrain_steps.len() != d) {
        return Err(CoopError::InvalidConfig(format!("each condition needs {d} pretrain step counts")));
    }
    let mut w = sweep_writer(cfg, "shared-init")?;
    let prepared = prepare(cfg)?;
    let mut bases: BTreeMap<u64, Checkpoint> = BTreeMap::new();
    bases.insert(cfg.cooperative.pretrain_steps, prepared.base.clone());
    let mut out = Vec::new();
    for cond in conditions {
        // A mismatched condition fails at the first specialist whose base
        // differs from the reference.
        let guard =
            if allow_mismatch { BaseGuard::AllowMismatch } else { BaseGuard::Verify(prepared.base.digest()) };
        for &p in &cond.pretrain_steps {
            if !bases.contains_key(&p) {
                if !allow_mismatch {
                    return Err(CoopError::BaseMismatch {
                        expected: prepared.base.digest().to_hex(),
                        found: format!("base pretrained for {p} steps"),
                    });
                }
                bases.insert(p, build_base(cfg, &prepared.corpora, p)?);
            }
        }
        let cond_bases: Vec<&Checkpoint> = cond.pretrain_steps.iter().map(|p| &bases[p]).collect();
        for &seed in &cfg.seeds {
            let jobs = specialist_jobs(cfg, seed);
            let trained = train_specialists(&prepared, &cond_bases, &jobs, cfg.cooperative.freeze_depth, guard)?;
            let ckpts: Vec<Checkpoint> = trained.iter().map(|t| t.ckpt.clone()).collect();
            let all: Vec<usize> = (0..d).collect();
            let router = fit_router(cfg, &prepared, &ckpts, &all, seed)?;
            let art = CoreArtifacts { seed, specialists: trained, fused: fuse(&prepared, ckpts, router)? };
            let (ew, _, gain, gates) = score(&prepared, &art)?;
            out.push(InitConditionResult {
                label: cond.label.clone(),
                pretrain_steps: cond.pretrain_steps.clone(),
                seed,
                fused_ew: ew,
                gain_vs_best_specialist_pct: gain,
                gates,
            });
        }
    }
    let mut csv = String::from("condition,seed,fused_ew,gain_vs_best_specialist_pct,routing_confusion\n");
    for r in &out {
        csv.push_str(&format!("{},{},{},{},{}\n", r.label, r.seed, r.fused_ew, r.gain_vs_best_specialist_pct, r.gates.confusion));
    }
    w.write_text("shared_init.csv", &csv)?;
    w.write_json("shared_init.json", &out)?;
    w.finish()?;
    Ok(out)
}

/// A heterogeneous-contributor condition: per-specialist job overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroCondition {
    pub label: String,
    pub overrides: Vec<(usize, JobOverride)>,
}

/// Different batch size, learning rate and step budget, one specialist each.
pub fn default_hetero_conditions(cfg: &ExperimentConfig) -> Vec<HeteroCondition> {
    let c = &cfg.cooperative;
    let last = cfg.domains.len().saturating_sub(1);
    vec![
        HeteroCondition { label: "diff_batch".into(), overrides: vec![(0, JobOverride::BatchSize(4))] },
        HeteroCondition { label: "diff_lr".into(), overrides: vec![(1.min(last), JobOverride::Lr(c.lr * 0.5))] },
        HeteroCondition {
            label: "diff_steps".into(),
            overrides: vec![(last, JobOverride::Steps((c.specialist_steps / 2).max(1)))],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroRow {
    pub label: String,
    pub seed: u64,
    pub fused_ew: f64,
    pub gain_vs_best_specialist_pct: f64,
    pub delta_vs_control_pp: f64,
    pub divergence_pct: BTreeMap<String, f64>,
}

/// The control (no overrides) row comes first for each seed.
pub fn run_heterogeneous(cfg: &ExperimentConfig, conditions: &[HeteroCondition]) -> Result<Vec<HeteroRow>> {
    let mut w = sweep_writer(cfg, "hetero")?;
    let prepared = prepare(cfg)?;
    let names = prepared.domain_names();
    let control = HeteroCondition { label: "control".into(), overrides: Vec::new() };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut control_gain = 0.0;
        for cond in std::iter::once(&control).chain(conditions) {
            let art = train_cooperative_with(cfg, &prepared, seed, &cond.overrides)?;
            let (ew, _, gain, _) = score(&prepared, &art)?;
            if cond.overrides.is_empty() && cond.label == "control" {
                control_gain = gain;
            }
            let divergence_pct = names
                .iter()
                .zip(&art.specialists)
                .map(|(n, s)| {
                    let own = evaluation::eval_loss_domain(&s.ckpt, &prepared.heldout[names_index(&names, n)], evaluation::EVAL_BATCH_SIZE)?;
                    Ok((n.clone(), improvement(prepared.base_losses[n], own)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            rows.push(HeteroRow {
                label: cond.label.clone(),
                seed,
                fused_ew: ew,
                gain_vs_best_specialist_pct: gain,
                delta_vs_control_pp: gain - control_gain,
                divergence_pct,
            });
        }
    }
    let mut csv = String::from("condition,seed,fused_ew,gain_vs_best_specialist_pct,delta_vs_control_pp\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.label, r.seed, r.fused_ew, r.gain_vs_best_specialist_pct, r.delta_vs_control_pp));
    }
    w.write_text("hetero.csv", &csv)?;
    w.write_json("hetero.json", &rows)?;
    w.finish()?;
    Ok(rows)
}
