use coop_numerics::{
    softmax_rows_in_place, AdamW, AdamWConfig, NumericsError, OpKind, ParamSet, Parameter, Tape,
    Tensor,
};
use proptest::prelude::*;

#[test]
fn matmul_of_ones() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(vec![2, 3], 1.0).unwrap()).unwrap();
    let b = t.constant(Tensor::full(vec![3, 2], 1.0).unwrap()).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 2]);
    assert!(t.value(c).data().iter().all(|&v| v == 3.0));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![3]).unwrap()).unwrap();
    let y = t.softmax(x).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_of_uniform_prediction_over_128() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::zeros(vec![2, 128]).unwrap()).unwrap();
    let loss = t.cross_entropy(logits, &[Some(5), Some(127)]).unwrap();
    // hand summation of -log(1/128)
    let hand: f64 = -(1.0f64 / 128.0).ln();
    assert!((t.value(loss).data()[0] - hand).abs() < 1e-12);
    assert!((hand - 4.852).abs() < 1e-3);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
    let b = t.constant(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    match &err {
        NumericsError::ShapeMismatch { op: OpKind::MatMul, detail } => {
            assert!(detail.contains("[2, 3] x [2, 3]"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().starts_with("matmul"));
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut t = Tape::new();
    assert!(matches!(
        t.constant(Tensor::vector(vec![1.0, f64::NAN]).unwrap()),
        Err(NumericsError::NonFinite { .. })
    ));
    let big = t.constant(Tensor::vector(vec![1e300, 1e300]).unwrap()).unwrap();
    let sq = t.mul(big, big).unwrap(); // overflows to inf
    assert!(matches!(t.gelu(sq), Err(NumericsError::NonFinite { op: OpKind::Gelu, input: 0 })));
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::zeros(vec![2, 4]).unwrap()).unwrap();
    let err = t.cross_entropy(logits, &[Some(1), Some(4)]).unwrap_err();
    assert!(matches!(err, NumericsError::IndexOutOfRange { index: 4, position: 1, .. }));
}

#[test]
fn embedding_reports_offending_position() {
    let mut t = Tape::new();
    let table = t.constant(Tensor::zeros(vec![3, 2]).unwrap()).unwrap();
    let err = t.embedding(table, &[0, 1, 7]).unwrap_err();
    assert!(matches!(err, NumericsError::IndexOutOfRange { index: 7, limit: 3, position: 2, .. }));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0]).unwrap()).unwrap();
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let y = t.gelu(x).unwrap();
    assert!(matches!(t.backward(y), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let w = t.param(Tensor::scalar(2.0)).unwrap();
    let c = t.constant(Tensor::scalar(5.0)).unwrap();
    let y = t.mul(w, c).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[5.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn causal_attention_ignores_future_positions() {
    // Changing the last key/value must not change earlier outputs.
    let build = |last: f64| {
        let mut t = Tape::new();
        let mut kv = vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6];
        kv[4] = last;
        kv[5] = last;
        let q = t.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let k = t.constant(Tensor::matrix(3, 2, kv.clone()).unwrap()).unwrap();
        let v = t.constant(Tensor::matrix(3, 2, kv).unwrap()).unwrap();
        let o = t.attention(q, k, v, 1, 3).unwrap();
        t.value(o).data().to_vec()
    };
    let a = build(0.6);
    let b = build(9.0);
    assert_eq!(&a[..4], &b[..4]);
    assert_ne!(&a[4..], &b[4..]);
}

// ---- optimizer --------------------------------------------------------------

fn single(value: f64) -> ParamSet {
    ParamSet::new(vec![Parameter::new("w", vec![value])])
}

#[test]
fn zero_gradient_zero_decay_is_fixed_point() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut p = ParamSet::new(vec![Parameter::new("a", vec![1.5, -2.0]), Parameter::new("b", vec![0.25])]);
    let before = p.clone();
    let mut opt = AdamW::new(cfg, &p);
    for _ in 0..5 {
        opt.step(&mut p, 100).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(opt.state.step_count, 5);
}

#[test]
fn warmup_first_step_is_a_tenth() {
    let cfg = AdamWConfig { learning_rate: 1e-3, warmup_fraction: 0.1, ..AdamWConfig::default() };
    // 1 / (0.1 * 100) = 0.1
    assert!((cfg.lr_at(1, 100) - 1e-4).abs() < 1e-18);
    assert_eq!(cfg.lr_at(10, 100), 1e-3);
    assert_eq!(cfg.lr_at(250, 100), 1e-3);
    let no_warmup = AdamWConfig { warmup_fraction: 0.0, ..cfg };
    assert_eq!(no_warmup.lr_at(1, 100), 1e-3);
}

/// Scalar AdamW written out longhand.
fn reference_adamw(mut w: f64, grads: &[f64], lr: f64, wd: f64, warm: f64, total: u64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as f64;
        let eff = lr * (t / (warm * total as f64)).min(1.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powf(t));
        let vh = v / (1.0 - b2.powf(t));
        w -= eff * wd * w;
        w -= eff * mh / (vh.sqrt() + eps);
        out.push(w);
    }
    out
}

#[test]
fn scalar_trajectory_matches_reference() {
    let cfg = AdamWConfig { learning_rate: 0.01, weight_decay: 0.1, warmup_fraction: 0.1, ..AdamWConfig::default() };
    let expected = reference_adamw(0.5, &[1.0, 1.0, 1.0], 0.01, 0.1, 0.1, 20);
    let mut p = single(0.5);
    let mut opt = AdamW::new(cfg, &p);
    for want in expected {
        p.get_mut(0).grad[0] = 1.0;
        opt.step(&mut p, 20).unwrap();
        assert!((p.get(0).value[0] - want).abs() < 1e-15);
        assert_eq!(p.get(0).grad[0], 0.0, "grads are zeroed after a step");
    }
}

#[test]
fn non_finite_gradient_aborts_and_names_parameter() {
    let mut p = ParamSet::new(vec![Parameter::new("ok", vec![1.0]), Parameter::new("bad", vec![1.0])]);
    p.get_mut(1).grad[0] = f64::INFINITY;
    let before = p.clone();
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    match opt.step(&mut p, 10) {
        Err(NumericsError::NonFiniteGradient(name)) => assert_eq!(name, "bad"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(p.get(0).value, before.get(0).value);
    assert_eq!(opt.state.step_count, 0);
}

// ---- properties -------------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-15.0f64..15.0, 2..9), 1..6)) {
        let cols = rows[0].len();
        let mut data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cycle().take(cols).copied()).collect();
        softmax_rows_in_place(&mut data, cols);
        for row in data.chunks_exact(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn layernorm_rows_are_standardized(
        seed in 0u64..1000,
        rows in 1usize..5,
        cols in 2usize..12,
        scale in 0.1f64..50.0,
        shift in -20.0f64..20.0,
    ) {
        use rand::Rng;
        let mut rng = coop_numerics::rng::stream(seed, "ln-prop");
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale + shift).collect();
        for row in data.chunks_exact(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / cols as f64;
            // rows with almost no spread are dominated by the variance floor
            prop_assume!(v >= 1e-3);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(rows, cols, data).unwrap()).unwrap();
        let g = t.constant(Tensor::full(vec![cols], 1.0).unwrap()).unwrap();
        let b = t.constant(Tensor::zeros(vec![cols]).unwrap()).unwrap();
        let y = t.layernorm(x, g, b).unwrap();
        for row in t.value(y).data().chunks_exact(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn identical_op_sequences_are_bit_identical(seed in 0u64..500) {
        use rand::Rng;
        let run = || {
            let mut rng = coop_numerics::rng::stream(seed, "det");
            let d: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let x = t.param(Tensor::matrix(3, 4, d.clone()).unwrap()).unwrap();
            let w = t.param(Tensor::matrix(4, 4, d.iter().chain(&d).chain(&d).take(16).copied().collect()).unwrap()).unwrap();
            let h = t.matmul(x, w).unwrap();
            let a = t.attention(h, h, h, 2, 3).unwrap();
            let l = t.cross_entropy(a, &[Some(0), Some(1), Some(2)]).unwrap();
            t.backward(l).unwrap();
            (t.value(l).data()[0].to_bits(), t.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
