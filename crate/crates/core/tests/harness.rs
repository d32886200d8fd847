use std::path::Path;

use coop_core::analysis::audit_results;
use coop_core::harness::results::{Aggregate, AGGREGATE_FILE};
use coop_core::harness::suites::{
    default_hetero_conditions, default_init_conditions, run_core_detailed, run_crossover, run_heterogeneous,
    run_scaling, run_shared_init_ablation, InitCondition,
};
use coop_core::harness::{ExperimentConfig, RunManifest};
use coop_core::CoopError;

fn tiny(dir: &Path, seeds: &[u64]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::ci();
    cfg.name = "tiny".into();
    cfg.seeds = seeds.to_vec();
    for d in &mut cfg.domains {
        d.n_chunks = 60;
    }
    cfg.cooperative.specialist_steps = 20;
    cfg.cooperative.pretrain_steps = 10;
    cfg.cooperative.mixed_chunks = 45;
    cfg.router.steps = 20;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

const LABELS: [&str; 9] = ["base", "fused", "fused_hard", "fused_sparse", "oracle", "uniform", "weight_avg", "monolithic", "wider"];

#[test]
fn core_run_writes_an_auditable_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny(&out, &[3, 4]);
    let run = run_core_detailed(&cfg).unwrap();

    // Nothing lands outside the output directory.
    let entries: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("run")]);

    let manifest = RunManifest::load(&out).unwrap();
    assert_eq!(manifest, run.manifest);
    assert_eq!(manifest.seeds, vec![3, 4]);
    assert!(manifest.errors.is_empty());
    assert_eq!(ExperimentConfig::from_ini(&manifest.config).unwrap(), cfg);
    for f in manifest.files.iter().chain(&manifest.reports) {
        assert!(out.join(f).is_file(), "{f}");
    }
    for seed in [3, 4] {
        let labels: Vec<&str> = run.reports[&seed].iter().map(|r| r.label.as_str()).collect();
        for l in LABELS {
            assert!(labels.contains(&l), "seed {seed} lacks {l}");
        }
        for name in cfg.domains.iter().map(|d| &d.name) {
            assert!(labels.contains(&format!("specialist_{name}").as_str()));
        }
        for r in &run.reports[&seed] {
            assert!(out.join(format!("seed_{seed}/reports/{}.json", r.label)).is_file());
            assert_eq!(r.base_digest, run.reports[&seed][0].base_digest);
        }
        assert!(out.join(format!("seed_{seed}/fused.manifest")).is_file());
        assert!(out.join(format!("seed_{seed}/cross_domain.csv")).is_file());
    }

    let agg: Aggregate = serde_json::from_str(&std::fs::read_to_string(out.join(AGGREGATE_FILE)).unwrap()).unwrap();
    let fused = &agg.metrics["fused.ew_loss"];
    let vals: Vec<f64> = run.summaries.iter().map(|s| s.fused_ew).collect();
    assert!((fused.mean - (vals[0] + vals[1]) / 2.0).abs() < 1e-12);
    assert!((fused.std - (vals[0] - vals[1]).abs() / 2f64.sqrt()).abs() < 1e-12);

    let s = &run.summaries[0];
    assert!(s.hard_ew.is_some() && s.oracle_ew.is_some() && s.wider_ew.is_some());
    assert_eq!(s.gates.stats.per_domain_gate_mass.len(), 3);

    let audit = audit_results(&out);
    assert!(audit.passed(), "{:?}", audit.issues);
    assert!(audit.checks_run > 0);
}

#[test]
fn identical_configs_give_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = tiny(&tmp.path().join("a"), &[5]);
    a.baselines.wider = false;
    a.baselines.monolithic = false;
    let mut b = a.clone();
    b.output_dir = tmp.path().join("b");
    let (ra, rb) = (run_core_detailed(&a).unwrap(), run_core_detailed(&b).unwrap());
    assert_eq!(ra.manifest.digests, rb.manifest.digests);
    assert_eq!(ra.summaries, rb.summaries);
    assert!(ra.summaries[0].wider_ew.is_none() && ra.summaries[0].monolithic_ew.is_none());
}

#[test]
fn invalid_configs_fail_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let mut cfg = tiny(&out, &[]);
    assert!(matches!(run_core_detailed(&cfg), Err(CoopError::InvalidConfig(_))));
    cfg.seeds = vec![1];
    cfg.cooperative.freeze_depth = 9;
    assert!(run_core_detailed(&cfg).is_err());
    assert!(!out.exists());
}

#[test]
fn crossover_single_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), &[2]);
    let table = run_crossover(&cfg, &[10], &[1]).unwrap();
    assert_eq!(table.cells.len(), 1);
    assert_eq!(table.leaders, vec![(10, 1)]);
    let c = &table.cells[0];
    assert_eq!((c.steps, c.freeze_depth, c.seed), (10, 1, 2));
    assert_eq!(table.mean_gain(10, 1), Some(c.gain_vs_base_pct));
    assert!(tmp.path().join("crossover.csv").is_file());
    assert!(audit_results(tmp.path()).passed());
}

#[test]
fn scaling_single_specialist_cannot_beat_the_best() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), &[2]);
    let rows = run_scaling(&cfg, &[1, 3]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].gain_vs_best_specialist_pct <= 0.0);
    assert!(rows[1].fused_ew < rows[0].fused_ew);
    assert!(run_scaling(&cfg, &[0]).is_err());
    assert!(run_scaling(&cfg, &[4]).is_err());
}

#[test]
fn shared_init_refuses_mismatched_bases() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), &[2]);
    let conds = default_init_conditions(cfg.cooperative.pretrain_steps, 3);
    assert_eq!(conds[1].pretrain_steps, vec![8, 10, 12]);
    assert_eq!(conds[2].pretrain_steps, vec![5, 10, 20]);
    assert!(matches!(run_shared_init_ablation(&cfg, &conds, false), Err(CoopError::BaseMismatch { .. })));

    let matched = run_shared_init_ablation(&cfg, &[InitCondition::matched(10, 3)], false).unwrap();
    let mut core_cfg = cfg.clone();
    core_cfg.output_dir = tmp.path().join("core");
    let core = run_core_detailed(&core_cfg).unwrap();
    assert_eq!(matched[0].fused_ew, core.summaries[0].fused_ew);
    assert!(run_shared_init_ablation(&cfg, &[InitCondition::matched(10, 2)], false).is_err());
}

#[test]
fn heterogeneous_contributors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), &[2]);
    let control = run_heterogeneous(&cfg, &[]).unwrap();
    assert_eq!(control.len(), 1);
    assert_eq!(control[0].label, "control");
    assert_eq!(control[0].delta_vs_control_pp, 0.0);

    let conds = default_hetero_conditions(&cfg);
    let steps = conds.into_iter().filter(|c| c.label == "diff_steps").collect::<Vec<_>>();
    let rows = run_heterogeneous(&cfg, &steps).unwrap();
    assert_eq!(rows[0].fused_ew, control[0].fused_ew);
    let last = &cfg.domains[2].name;
    assert!(rows[1].divergence_pct[last] < rows[0].divergence_pct[last]);
    for d in &cfg.domains[..2] {
        assert_eq!(rows[1].divergence_pct[&d.name], rows[0].divergence_pct[&d.name]);
    }
}
