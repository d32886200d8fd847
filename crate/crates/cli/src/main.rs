//! `coop`: command-line front end for the cooperative-training laboratory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coop_core::analysis::{audit_results, parse_points_csv, regression_report};
use coop_core::corpus::{self, DomainCorpus};
use coop_core::evaluation::{equal_weight, per_domain_losses, LanguageModel};
use coop_core::fusion::{FusedManifest, FusionMode};
use coop_core::harness::suites::{self, default_hetero_conditions, default_init_conditions};
use coop_core::harness::{derive_seed, ExperimentConfig};
use coop_core::model::Checkpoint;
use coop_core::protocol::{self, BaseGuard, TrainSettings};
use coop_core::{CoopError, Result};

#[derive(Parser)]
#[command(name = "coop", version, about = "Shared-init specialist training and post-hoc fusion")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config file; the ci preset is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accept specialists trained from different bases.
    #[arg(long, global = true)]
    allow_mismatch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus tools.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Fine-tune one specialist from a base checkpoint.
    TrainSpecialist {
        /// Domain name from the config.
        #[arg(long)]
        domain: String,
        /// Base checkpoint; built from the config when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Overrides the configured specialist step count.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides the configured freeze depth K.
        #[arg(long)]
        freeze: Option<usize>,
    },
    /// Train the equal-compute mixture baseline.
    TrainMonolithic {
        /// Starting checkpoint; built from the config when absent.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Train a router over specialist checkpoints and write a fused manifest.
    Fuse {
        /// Comma-separated specialist checkpoints, in domain order.
        #[arg(long, value_delimiter = ',', required = true)]
        specialists: Vec<PathBuf>,
        /// The base they were trained from.
        #[arg(long)]
        base: PathBuf,
        /// soft, hard or sparse_top1.
        #[arg(long, default_value = "soft")]
        mode: FusionMode,
    },
    /// Per-domain held-out losses of a checkpoint or fused manifest.
    Eval {
        /// A .ckpt file or a fused manifest.
        #[arg(long)]
        model: PathBuf,
    },
    /// The canonical cooperative experiment with all baselines.
    RunCore,
    /// Parameter sweeps and ablations.
    Sweep {
        #[command(subcommand)]
        command: SweepCommand,
    },
    /// Divergence→gain regression over a two-column CSV.
    Regress {
        /// CSV of divergence_pct,gain_pct rows.
        #[arg(long)]
        points: PathBuf,
    },
    /// Integrity checks over a results directory.
    Audit {
        /// A run-core or sweep output directory.
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Generate and dump the configured domains.
    Gen {
        /// Config file whose `[domain.*]` sections are generated.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Specialist training length against fused gain, per freeze depth.
    Crossover {
        #[arg(long, value_delimiter = ',', required = true)]
        steps: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        freeze: Vec<usize>,
    },
    /// Freeze depth ablation.
    Freeze {
        #[arg(long, value_delimiter = ',', required = true)]
        freeze: Vec<usize>,
    },
    /// Number of fused specialists.
    Scaling {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
    },
    /// Identical, mildly and strongly mismatched shared initialisations.
    SharedInit,
    /// Specialists trained with different batch size, lr or step budget.
    Hetero,
}

enum Failure {
    Error(CoopError),
    Audit,
}

impl From<CoopError> for Failure {
    fn from(e: CoopError) -> Self {
        Failure::Error(e)
    }
}

fn load_config(g: &Global, spec: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match spec.or(g.config.as_deref()) {
        Some(p) => ExperimentConfig::from_ini(&fs::read_to_string(p).map_err(|e| CoopError::io(p, e))?)?,
        None => ExperimentConfig::ci(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) {
    use std::io::Write;
    // A closed pipe (`coop ... | head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| CoopError::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| CoopError::io(path, e))
}

fn base_for(cfg: &ExperimentConfig, corpora: &[DomainCorpus], path: Option<&Path>) -> Result<Checkpoint> {
    match path {
        Some(p) => Checkpoint::load(p),
        None => suites::build_base(cfg, corpora, cfg.cooperative.pretrain_steps),
    }
}

fn guard(g: &Global, base: &Checkpoint) -> BaseGuard {
    if g.allow_mismatch {
        BaseGuard::AllowMismatch
    } else {
        BaseGuard::Verify(base.digest())
    }
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Corpus { command: CorpusCommand::Gen { spec } } => {
            let cfg = load_config(g, spec.as_deref())?;
            let out = &cfg.output_dir;
            let mut summary = Vec::new();
            for c in suites::generate_corpora(&cfg)? {
                for set in [&c.train, &c.heldout] {
                    let split = format!("{:?}", set.split).to_lowercase();
                    let path = out.join(format!("{}.{split}.tsv", c.spec.name));
                    let mut buf = Vec::new();
                    set.dump(&mut buf).map_err(|e| CoopError::io(&path, e))?;
                    write(&path, &String::from_utf8_lossy(&buf))?;
                }
                summary.push(serde_json::json!({
                    "domain": c.spec.name,
                    "kind": c.spec.kind.to_string(),
                    "train_chunks": c.train.len(),
                    "heldout_chunks": c.heldout.len(),
                    "heldout_targets": c.heldout.target_count(),
                }));
            }
            print_json(&summary);
        }
        Command::TrainSpecialist { domain, base, steps, freeze } => {
            let cfg = load_config(g, None)?;
            let corpora = suites::generate_corpora(&cfg)?;
            let base = base_for(&cfg, &corpora, base.as_deref())?;
            let idx = cfg
                .domains
                .iter()
                .position(|d| d.name == domain)
                .ok_or_else(|| CoopError::InvalidInput(format!("domain `{domain}` is not configured")))?;
            let c = &cfg.cooperative;
            let seed = derive_seed(first_seed(&cfg), "specialist", idx as u64);
            let settings = TrainSettings::new(steps.unwrap_or(c.specialist_steps), c.batch_size, c.lr, seed);
            let heldout = [corpora[idx].heldout.clone()];
            let probe = protocol::Probe { every: (settings.steps / 10).max(1), heldout: &heldout };
            let k = freeze.unwrap_or(c.freeze_depth);
            let trained =
                protocol::train_specialist(&base, guard(g, &base), &corpora[idx].train, &settings, k, Some(probe))?;
            let path = cfg.output_dir.join(format!("specialist_{domain}.ckpt"));
            fs::create_dir_all(&cfg.output_dir).map_err(|e| CoopError::io(&cfg.output_dir, e))?;
            trained.ckpt.save(&path)?;
            let log_path = cfg.output_dir.join(format!("specialist_{domain}.log.json"));
            let log = serde_json::to_string_pretty(&trained.log).expect("log serializes");
            fs::write(&log_path, log).map_err(|e| CoopError::io(&log_path, e))?;
            println!("{} {}", trained.ckpt.digest(), path.display());
        }
        Command::TrainMonolithic { base } => {
            let cfg = load_config(g, None)?;
            let corpora = suites::generate_corpora(&cfg)?;
            let base = base_for(&cfg, &corpora, base.as_deref())?;
            let sets: Vec<_> = corpora.iter().map(|c| &c.train).collect();
            let total = sets.iter().map(|s| s.len()).min().unwrap_or(0) * sets.len();
            let seed = first_seed(&cfg);
            let mix = corpus::mixed_stream_sized(
                &sets,
                &vec![1.0 / sets.len() as f64; sets.len()],
                total,
                derive_seed(seed, "monolithic-mix", 0),
            )?;
            let c = &cfg.cooperative;
            let settings =
                TrainSettings::new(cfg.monolithic_steps(), c.batch_size, c.lr, derive_seed(seed, "monolithic", 0));
            let trained = protocol::train_monolithic(&base, guard(g, &base), &mix, &settings, c.freeze_depth, None)?;
            let path = cfg.output_dir.join("monolithic.ckpt");
            fs::create_dir_all(&cfg.output_dir).map_err(|e| CoopError::io(&cfg.output_dir, e))?;
            trained.ckpt.save(&path)?;
            println!("{} {}", trained.ckpt.digest(), path.display());
        }
        Command::Fuse { specialists, base, mode } => {
            let cfg = load_config(g, None)?;
            let prepared = suites::Prepared::from_base(&cfg, Checkpoint::load(&base)?)?;
            let ckpts = specialists.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            if !g.allow_mismatch {
                for c in &ckpts {
                    BaseGuard::Verify(prepared.base.digest()).check_lineage(c)?;
                }
            }
            let all: Vec<usize> = (0..ckpts.len().min(cfg.domains.len())).collect();
            let router = suites::fit_router(&cfg, &prepared, &ckpts, &all, first_seed(&cfg))?;
            let out = &cfg.output_dir;
            let abs = |p: &Path| fs::canonicalize(p).map(|p| p.display().to_string()).map_err(|e| CoopError::io(p, e));
            let manifest = FusedManifest {
                mode,
                router,
                specialists: ckpts.iter().zip(&specialists).map(|(c, p)| Ok((c.digest(), Some(abs(p)?)))).collect::<Result<_>>()?,
                base: Some((prepared.base.digest(), Some(abs(&base)?))),
            };
            let path = out.join("fused.manifest");
            write(&path, &manifest.to_text())?;
            println!("{}", path.display());
        }
        Command::Eval { model } => {
            let cfg = load_config(g, None)?;
            let heldout: Vec<_> = suites::generate_corpora(&cfg)?.into_iter().map(|c| c.heldout).collect();
            let text = fs::read(&model).map_err(|e| CoopError::io(&model, e))?;
            let boxed: Box<dyn LanguageModel> = if text.starts_with(b"coop-fused") {
                let m = FusedManifest::parse(&String::from_utf8_lossy(&text))?;
                Box::new(m.load_model(model.parent().unwrap_or(Path::new(".")))?)
            } else {
                Box::new(Checkpoint::from_bytes(&text).map_err(CoopError::from)?)
            };
            let losses = per_domain_losses(boxed.as_ref(), &heldout)?;
            let ew = equal_weight(&losses)?;
            print_json(&serde_json::json!({ "per_domain_loss": losses, "ew_loss": ew }));
        }
        Command::RunCore => {
            let cfg = load_config(g, None)?;
            let manifest = suites::run_core(&cfg)?;
            eprintln!("wrote {}", cfg.output_dir.display());
            if !manifest.errors.is_empty() {
                for e in &manifest.errors {
                    eprintln!("error: {e}");
                }
                return Err(Failure::Error(CoopError::InvalidInput(format!("{} seed(s) failed", manifest.errors.len()))));
            }
        }
        Command::Sweep { command } => {
            let cfg = load_config(g, None)?;
            match command {
                SweepCommand::Crossover { steps, freeze } => print_json(&suites::run_crossover(&cfg, &steps, &freeze)?),
                SweepCommand::Freeze { freeze } => print_json(&suites::run_freeze_sweep(&cfg, &freeze)?),
                SweepCommand::Scaling { n } => print_json(&suites::run_scaling(&cfg, &n)?),
                SweepCommand::SharedInit => {
                    let conds = default_init_conditions(cfg.cooperative.pretrain_steps, cfg.domains.len());
                    print_json(&suites::run_shared_init_ablation(&cfg, &conds, g.allow_mismatch)?)
                }
                SweepCommand::Hetero => {
                    print_json(&suites::run_heterogeneous(&cfg, &default_hetero_conditions(&cfg))?)
                }
            }
        }
        Command::Regress { points } => {
            let text = fs::read_to_string(&points).map_err(|e| CoopError::io(&points, e))?;
            let report = regression_report(&parse_points_csv(&text)?)?;
            if let Some(out) = &g.out {
                let json = serde_json::to_string_pretty(&report).expect("serializable");
                write(&out.join("regression.json"), &json)?;
                write(&out.join("residuals.csv"), &report.residuals_csv())?;
            }
            print_json(&report);
        }
        Command::Audit { dir } => {
            let report = audit_results(&dir);
            print_json(&report);
            eprintln!("{}/{} checks passed", report.checks_passed, report.checks_run);
            if !report.passed() {
                return Err(Failure::Audit);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Audit) => ExitCode::from(2),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
