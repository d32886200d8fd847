use coop_core::corpus::{equal_mixture, generate_domain, DomainCorpus, DomainSpec, GeneratorKind};
use coop_core::evaluation::{eval_loss_domain, EVAL_BATCH_SIZE};
use coop_core::model::{init_model, ModelConfig};
use coop_core::protocol::{
    make_base, train_monolithic, train_specialist, train_wider, BaseGuard, Probe, TrainSettings,
};
use coop_core::CoopError;

fn cfg(freeze_depth: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, hidden_dim: 16, n_heads: 2, vocab_size: 128, context_length: 16, freeze_depth }
}

fn domains() -> Vec<DomainCorpus> {
    [GeneratorKind::ArithmeticExpressions, GeneratorKind::BalancedBrackets]
        .iter()
        .enumerate()
        .map(|(i, &k)| generate_domain(&DomainSpec::new(k.to_string(), k, 40 + i as u64, 60), 16).unwrap())
        .collect()
}

fn settings(steps: u64) -> TrainSettings {
    TrainSettings::new(steps, 4, 3e-3, 7)
}

#[test]
fn zero_step_base_is_the_raw_init() {
    let d = domains();
    let mix = equal_mixture(&d, 40, 1).unwrap();
    let base = make_base(cfg(1), 0, &mix, 5, &settings(10)).unwrap();
    assert_eq!(base.digest(), init_model(cfg(1), 5).unwrap().digest());
}

#[test]
fn pretraining_lowers_loss_and_is_deterministic() {
    let d = domains();
    let mix = equal_mixture(&d, 80, 1).unwrap();
    let init = init_model(cfg(0), 5).unwrap();
    let a = make_base(cfg(0), 30, &mix, 5, &settings(30)).unwrap();
    let b = make_base(cfg(0), 30, &mix, 5, &settings(30)).unwrap();
    assert_eq!(a.digest(), b.digest());
    for set in [&d[0].heldout, &d[1].heldout] {
        assert!(eval_loss_domain(&a, set, EVAL_BATCH_SIZE).unwrap() < eval_loss_domain(&init, set, EVAL_BATCH_SIZE).unwrap());
    }
}

#[test]
fn zero_step_specialist_keeps_base_weights() {
    let d = domains();
    let base = init_model(cfg(0), 3).unwrap();
    let s = train_specialist(&base, BaseGuard::Verify(base.digest()), &d[0].train, &settings(0), 1, None).unwrap();
    assert_eq!(s.ckpt.weights(), base.weights());
    assert_eq!(s.ckpt.provenance().base_digest, Some(base.digest()));
    assert!(s.log.steps.is_empty());
}

#[test]
fn frozen_arrays_are_bit_identical() {
    let d = domains();
    let base = init_model(cfg(0), 3).unwrap();
    let s = train_specialist(&base, BaseGuard::Verify(base.digest()), &d[0].train, &settings(8), 1, None).unwrap();
    let c = *s.ckpt.config();
    assert_eq!(c.freeze_depth, 1);
    let mut changed = 0;
    for (i, (a, b)) in base.weights().iter().zip(s.ckpt.weights()).enumerate() {
        if coop_core::model::is_trainable(&c, i) {
            changed += usize::from(a.data != b.data);
        } else {
            assert_eq!(a.data, b.data, "frozen array {} moved", a.name);
        }
    }
    assert!(changed > 0);
}

#[test]
fn mismatched_base_is_refused() {
    let d = domains();
    let base = init_model(cfg(0), 3).unwrap();
    let other = init_model(cfg(0), 4).unwrap();
    let err = train_specialist(&other, BaseGuard::Verify(base.digest()), &d[0].train, &settings(2), 1, None);
    assert!(matches!(err, Err(CoopError::BaseMismatch { .. })));
    assert!(train_specialist(&other, BaseGuard::AllowMismatch, &d[0].train, &settings(2), 1, None).is_ok());
    let s = train_specialist(&other, BaseGuard::AllowMismatch, &d[0].train, &settings(0), 1, None).unwrap();
    assert!(BaseGuard::Verify(base.digest()).check_lineage(&s.ckpt).is_err());
    assert!(BaseGuard::Verify(other.digest()).check_lineage(&s.ckpt).is_ok());
}

#[test]
fn specialists_diverge_toward_their_domain() {
    let d = domains();
    let mix = equal_mixture(&d, 80, 1).unwrap();
    let base = make_base(cfg(0), 20, &mix, 5, &settings(20)).unwrap();
    let guard = BaseGuard::Verify(base.digest());
    for (i, dom) in d.iter().enumerate() {
        let s = train_specialist(&base, guard, &dom.train, &settings(60), 1, None).unwrap();
        let own = eval_loss_domain(&s.ckpt, &dom.heldout, EVAL_BATCH_SIZE).unwrap();
        let base_own = eval_loss_domain(&base, &dom.heldout, EVAL_BATCH_SIZE).unwrap();
        let cross = eval_loss_domain(&s.ckpt, &d[1 - i].heldout, EVAL_BATCH_SIZE).unwrap();
        assert!(own < base_own, "{}: {own} vs base {base_own}", dom.spec.name);
        assert!(cross > own);
    }
}

#[test]
fn zero_step_monolithic_is_the_base() {
    let d = domains();
    let mix = equal_mixture(&d, 40, 1).unwrap();
    let base = init_model(cfg(0), 3).unwrap();
    let m = train_monolithic(&base, BaseGuard::Verify(base.digest()), &mix, &settings(0), 1, None).unwrap();
    assert_eq!(m.ckpt.weights(), base.weights());
}

#[test]
fn wider_model_checks_capacity() {
    let d = domains();
    let mix = equal_mixture(&d, 40, 1).unwrap();
    let reference = cfg(0);
    let small = ModelConfig { hidden_dim: 24, ..reference };
    assert!(matches!(train_wider(small, &reference, &mix, &settings(0)), Err(CoopError::InvalidConfig(_))));
    let wide = ModelConfig { hidden_dim: 32, ..reference };
    let w = train_wider(wide, &reference, &mix, &settings(0)).unwrap();
    assert_eq!(w.weights(), init_model(wide, 7).unwrap().weights());
    let ratio: f64 = w.provenance().annotations["param_ratio"].parse().unwrap();
    assert!(ratio >= 3.0);
    assert!(w.provenance().base_digest.is_none());
}

#[test]
fn training_log_steps_and_probes() {
    let d = domains();
    let base = init_model(cfg(0), 3).unwrap();
    let held = [d[0].heldout.clone()];
    let probe = Probe { every: 4, heldout: &held };
    let s = train_specialist(&base, BaseGuard::AllowMismatch, &d[0].train, &settings(10), 1, Some(probe)).unwrap();
    let steps: Vec<u64> = s.log.steps.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    let evals: Vec<u64> = s.log.evals.iter().map(|r| r.step).collect();
    assert_eq!(evals, vec![4, 8, 10]);
    let last = s.log.evals.last().unwrap().heldout_loss[&d[0].spec.name];
    assert_eq!(last, eval_loss_domain(&s.ckpt, &d[0].heldout, EVAL_BATCH_SIZE).unwrap());
}

#[test]
fn invalid_settings_and_data_are_rejected() {
    let d = domains();
    let base = init_model(cfg(0), 3).unwrap();
    let g = BaseGuard::AllowMismatch;
    assert!(train_specialist(&base, g, &d[0].train, &TrainSettings::new(2, 0, 1e-3, 1), 1, None).is_err());
    assert!(train_specialist(&base, g, &d[0].train, &TrainSettings::new(2, 4, 0.0, 1), 1, None).is_err());
    assert!(train_specialist(&base, g, &d[0].train, &settings(2), 3, None).is_err());
    let empty = coop_core::corpus::PackedChunkSet { chunks: vec![], origin: vec![], source_index: vec![], ..d[0].train.clone() };
    assert!(train_specialist(&base, g, &empty, &settings(2), 1, None).is_err());
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let d = domains();
    let base = init_model(cfg(0), 3).unwrap();
    let s = TrainSettings { warmup_fraction: 0.0, weight_decay: 0.0, ..TrainSettings::new(50, 4, 1e300, 1) };
    match train_specialist(&base, BaseGuard::AllowMismatch, &d[0].train, &s, 0, None) {
        Err(CoopError::Divergence { step, last_good, .. }) => assert!(last_good < step),
        other => panic!("unexpected {other:?}"),
    }
}
