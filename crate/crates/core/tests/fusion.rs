use std::collections::BTreeMap;

use coop_core::corpus::{equal_mixture, generate_domain, DomainCorpus, DomainSpec, GeneratorKind, PackedChunkSet};
use coop_core::evaluation::{eval_loss_domain, LossMatrix, EVAL_BATCH_SIZE};
use coop_core::fusion::{
    average_checkpoints, compute_gates, harden, mix_logits, oracle_from_matrix, routing_diagnostics, shared_base,
    sparse_agreement, train_router, FusedManifest, FusedModel, FusionMode, InputMode, Router, RouterArray, RouterKind,
};
use coop_core::model::{init_model, Checkpoint, ModelConfig, Provenance};
use coop_core::protocol::{make_base, train_specialist, BaseGuard, TrainSettings};
use coop_core::CoopError;
use coop_numerics::Tensor;

fn cfg(freeze_depth: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, hidden_dim: 16, n_heads: 2, vocab_size: 128, context_length: 16, freeze_depth }
}

fn domains() -> Vec<DomainCorpus> {
    [GeneratorKind::ArithmeticExpressions, GeneratorKind::BalancedBrackets]
        .iter()
        .enumerate()
        .map(|(i, &k)| generate_domain(&DomainSpec::new(k.to_string(), k, 50 + i as u64, 60), 16).unwrap())
        .collect()
}

fn heldout(d: &[DomainCorpus]) -> Vec<PackedChunkSet> {
    d.iter().map(|c| c.heldout.clone()).collect()
}

/// A base plus one specialist per domain, all at K = 1.
fn cooperative(steps: u64) -> (Checkpoint, Vec<Checkpoint>, Vec<DomainCorpus>) {
    let d = domains();
    let mix = equal_mixture(&d, 60, 1).unwrap();
    let base = make_base(cfg(0), 10, &mix, 3, &TrainSettings::new(10, 4, 3e-3, 3)).unwrap();
    let specs = d
        .iter()
        .enumerate()
        .map(|(i, dom)| {
            let s = TrainSettings::new(steps, 4, 3e-3, 10 + i as u64);
            train_specialist(&base, BaseGuard::Verify(base.digest()), &dom.train, &s, 1, None).unwrap().ckpt
        })
        .collect();
    (base, specs, d)
}

fn linear(n: usize, d: usize, w: Vec<f64>) -> Router {
    Router {
        kind: RouterKind::Linear,
        input_mode: InputMode::SpecialistMean,
        n_experts: n,
        hidden_dim: d,
        arrays: vec![RouterArray { name: "w_r".into(), shape: vec![n, d], data: w }],
    }
}

#[test]
fn fresh_routers_give_uniform_gates() {
    let h = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
    for kind in [RouterKind::Linear, RouterKind::Mlp2, RouterKind::Uniform] {
        let r = Router::init(kind, InputMode::SpecialistMean, 3, 4, 9).unwrap();
        let g = compute_gates(&r, &[&h, &h, &h], None).unwrap();
        assert_eq!(g.shape(), &[3, 3]);
        assert!(g.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15), "{kind}");
    }
}

#[test]
fn gate_logits_ten_zero_zero() {
    let r = linear(3, 1, vec![10.0, 0.0, 0.0]);
    let g = r.gates_from_input(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
    assert!((g.data()[0] - 0.99991).abs() < 1e-5);
    assert!((g.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn specialist_mean_of_identical_hiddens_is_that_hidden() {
    let h = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let r = Router::init(RouterKind::Linear, InputMode::SpecialistMean, 3, 2, 0).unwrap();
    let x = coop_core::fusion::router_input(&r, &[&h, &h, &h], None).unwrap();
    assert_eq!(x.data(), h.data());
}

#[test]
fn mixing_with_one_hot_and_half_gates() {
    let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::new(vec![2, 3], vec![-1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let onehot = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = mix_logits(&onehot, &[&a, &b]).unwrap();
    assert_eq!(&m.data()[..3], &a.data()[..3]);
    assert_eq!(&m.data()[3..], &b.data()[3..]);
    let half = Tensor::full(vec![2, 2], 0.5).unwrap();
    let m = mix_logits(&half, &[&a, &b]).unwrap();
    assert_eq!(m.data(), &[0.0, 1.0, 2.0, 2.0, 2.5, 3.0]);
}

#[test]
fn harden_picks_lowest_index_on_ties() {
    let g = Tensor::new(vec![3, 3], vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.1, 0.1, 0.8]).unwrap();
    assert_eq!(harden(&g).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn single_expert_fusion_is_the_expert() {
    let (_, specs, d) = cooperative(5);
    let fm = FusedModel::new(vec![specs[0].clone()], Router::uniform(1, 16), FusionMode::Soft, None).unwrap();
    let held = heldout(&d);
    for set in &held {
        assert_eq!(eval_loss_domain(&fm, set, EVAL_BATCH_SIZE).unwrap(), eval_loss_domain(&specs[0], set, EVAL_BATCH_SIZE).unwrap());
    }
}

#[test]
fn one_hot_router_reproduces_selected_specialist() {
    let (_, specs, d) = cooperative(5);
    let held = heldout(&d);
    let mut r = Router::init(RouterKind::Linear, InputMode::SpecialistMean, 2, 16, 0).unwrap();
    let fm = FusedModel::new(specs.clone(), r.clone(), FusionMode::Hard, None).unwrap();
    let zero = routing_diagnostics(&fm, &held).unwrap();
    assert!(zero.per_domain_gate_mass.values().all(|m| m == &vec![1.0, 0.0]));
    let loss = eval_loss_domain(&fm, &held[1], EVAL_BATCH_SIZE).unwrap();
    assert!((loss - eval_loss_domain(&specs[0], &held[1], EVAL_BATCH_SIZE).unwrap()).abs() < 1e-12);
    r.arrays[0].data.iter_mut().for_each(|v| *v = 0.0);
    let soft = FusedModel::new(specs.clone(), r, FusionMode::Soft, None).unwrap();
    let stats = routing_diagnostics(&soft, &held).unwrap();
    assert!(stats.max_gate_min == 0.5 && stats.switches_per_prompt == 0.0);
}

#[test]
fn router_training_leaves_specialists_untouched() {
    let (base, specs, d) = cooperative(20);
    let digests: Vec<_> = specs.iter().map(|s| s.digest()).collect();
    let mix = equal_mixture(&d, 60, 2).unwrap();
    let settings = TrainSettings::new(30, 8, 3e-2, 5);
    let r = train_router(&specs, Some(&base), RouterKind::Linear, InputMode::SpecialistMean, &mix, &settings).unwrap();
    assert_eq!(specs.iter().map(|s| s.digest()).collect::<Vec<_>>(), digests);
    let init = Router::init(RouterKind::Linear, InputMode::SpecialistMean, 2, 16, 5).unwrap();
    assert_ne!(r, init);
    let untrained = train_router(&specs, None, RouterKind::Linear, InputMode::SpecialistMean, &mix, &TrainSettings::new(0, 8, 3e-2, 5)).unwrap();
    assert_eq!(untrained, init);
    assert!(train_router(&specs, None, RouterKind::Uniform, InputMode::SpecialistMean, &mix, &settings).is_err());
    assert!(train_router(&specs, None, RouterKind::Linear, InputMode::BaseHidden, &mix, &settings).is_err());

    let held = heldout(&d);
    let trained = FusedModel::new(specs.clone(), r, FusionMode::Soft, None).unwrap();
    let uniform = FusedModel::new(specs.clone(), Router::uniform(2, 16), FusionMode::Soft, None).unwrap();
    let ew = |m: &FusedModel| held.iter().map(|h| eval_loss_domain(m, h, EVAL_BATCH_SIZE).unwrap()).sum::<f64>();
    assert!(ew(&trained) < ew(&uniform));
}

#[test]
fn base_hidden_router_needs_the_base() {
    let (base, specs, d) = cooperative(5);
    let r = Router::init(RouterKind::Linear, InputMode::BaseHidden, 2, 16, 0).unwrap();
    assert!(FusedModel::new(specs.clone(), r.clone(), FusionMode::Soft, None).is_err());
    let fm = FusedModel::new(specs, r, FusionMode::Soft, Some(base)).unwrap();
    assert!(eval_loss_domain(&fm, &d[0].heldout, EVAL_BATCH_SIZE).unwrap().is_finite());
}

#[test]
fn oracle_picks_column_minimum() {
    let m = LossMatrix {
        rows: vec!["a".into(), "b".into()],
        domains: vec!["x".into(), "y".into()],
        values: vec![vec![1.0, 3.0], vec![2.0, 1.0]],
    };
    let o = oracle_from_matrix(&m).unwrap();
    assert_eq!(o.assignment, BTreeMap::from([("x".to_string(), 0), ("y".to_string(), 1)]));
    assert_eq!(o.ew_loss, 1.0);
}

#[test]
fn sparse_matches_dense_for_identical_specialists() {
    let (base, specs, d) = cooperative(5);
    let held = heldout(&d);
    let twins = vec![specs[0].clone(), specs[0].clone()];
    let mut r = Router::init(RouterKind::Linear, InputMode::SpecialistMean, 2, 16, 0).unwrap();
    r.arrays[0].data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7) % 5) as f64 - 2.0);
    let fm = FusedModel::new(twins, r.clone(), FusionMode::SparseTop1, Some(base.clone())).unwrap();
    assert_eq!(sparse_agreement(&fm, &held).unwrap(), 100.0);
    let one = FusedModel::new(vec![specs[0].clone()], Router::uniform(1, 16), FusionMode::SparseTop1, Some(base)).unwrap();
    assert_eq!(sparse_agreement(&one, &held).unwrap(), 100.0);
    assert_eq!(
        eval_loss_domain(&one, &held[0], EVAL_BATCH_SIZE).unwrap(),
        eval_loss_domain(&specs[0], &held[0], EVAL_BATCH_SIZE).unwrap()
    );
}

#[test]
fn weight_average_is_elementwise() {
    let a = init_model(cfg(0), 1).unwrap();
    let doubled = a.weights().iter().map(|w| coop_core::model::WeightArray { data: w.data.iter().map(|v| 2.0 * v).collect(), ..w.clone() }).collect();
    let b = Checkpoint::assemble(*a.config(), doubled, Provenance::default()).unwrap();
    let avg = average_checkpoints(&[a.clone(), b]).unwrap();
    for (x, y) in avg.weights().iter().zip(a.weights()) {
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - 1.5 * q).abs() <= 1e-15 * q.abs().max(1.0));
        }
    }
    assert!(average_checkpoints(&[]).is_err());
    assert!(average_checkpoints(&[a, init_model(cfg(1), 1).unwrap()]).is_err());
}

#[test]
fn shared_base_requires_agreement() {
    let (base, specs, _) = cooperative(0);
    assert_eq!(shared_base(&specs), Some(base.digest()));
    assert_eq!(shared_base(&[specs[0].clone(), base]), None);
}

#[test]
fn manifest_round_trip_and_reload() {
    let (base, specs, d) = cooperative(5);
    let dir = tempfile::tempdir().unwrap();
    let mut refs = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let name = format!("s{i}.ckpt");
        s.save(&dir.path().join(&name)).unwrap();
        refs.push((s.digest(), Some(name)));
    }
    base.save(&dir.path().join("base.ckpt")).unwrap();
    let r = linear(2, 16, (0..32).map(|i| (i as f64 * 0.37).sin() * 0.1 + 1e-17).collect());
    let m = FusedManifest { mode: FusionMode::Soft, router: r, specialists: refs, base: Some((base.digest(), Some("base.ckpt".into()))) };
    let text = m.to_text();
    assert_eq!(FusedManifest::parse(&text).unwrap(), m);
    let fm = m.load_model(dir.path()).unwrap();
    let direct = FusedModel::new(specs.clone(), m.router.clone(), FusionMode::Soft, Some(base)).unwrap();
    assert_eq!(
        eval_loss_domain(&fm, &d[0].heldout, EVAL_BATCH_SIZE).unwrap(),
        eval_loss_domain(&direct, &d[0].heldout, EVAL_BATCH_SIZE).unwrap()
    );

    let swapped = FusedManifest { specialists: vec![m.specialists[1].clone(), m.specialists[1].clone()], ..m.clone() };
    let mut wrong = swapped.clone();
    wrong.specialists[0].1 = Some("s0.ckpt".into());
    assert!(matches!(wrong.load_model(dir.path()), Err(CoopError::BaseMismatch { .. })));
    assert!(swapped.load_model(dir.path()).is_ok());
}

#[test]
fn malformed_manifests_are_rejected() {
    let m = FusedManifest {
        mode: FusionMode::Hard,
        router: linear(1, 2, vec![0.5, -0.5]),
        specialists: vec![(init_model(cfg(0), 1).unwrap().digest(), None)],
        base: None,
    };
    let good = m.to_text();
    assert_eq!(FusedManifest::parse(&good).unwrap(), m);
    let cases = [
        String::new(),
        good.replace("coop-fused 1", "coop-fused 2"),
        good.replace("mode hard", "mode fuzzy"),
        good.replace("experts 1", "experts 2"),
        good.replace("0.5 -0.5", "0.5"),
        good.replace("0.5 -0.5", "0.5 nope"),
        good.replace("array w_r 1 2", "array w_r 99999 99999"),
        format!("{good}extra 1\n"),
    ];
    for c in &cases {
        assert!(FusedManifest::parse(c).is_err(), "accepted:\n{c}");
    }
}
