//! Analytic gradients against central finite differences, one case per primitive.

use coop_numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds a scalar from the op output by a fixed random projection so every
/// output element contributes to the checked gradient.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Infinity-norm relative error between analytic and numeric gradients.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().chain(analytic).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn gradcheck<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = coop_numerics::rng::stream(99, name);
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Vec<Vec<f64>>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars);
        let out_shape = tape.value(out).shape().to_vec();
        let w = weights.cloned().unwrap_or_else(|| Tensor::full(out_shape, 1.0).unwrap());
        let loss = project(&mut tape, out, &w);
        let value = tape.value(loss).data()[0];
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|v| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
            .collect();
        (value, grads, w)
    };
    // Draw the projection once, from the output shape.
    let (_, _, ones) = eval(&inputs, None);
    let weights = random_tensor(&mut rng, ones.shape().to_vec(), 1.0);
    let (_, analytic, _) = eval(&inputs, Some(&weights));
    for (which, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[which].data_mut()[j] -= H;
            let fp = eval(&plus, Some(&weights)).0;
            let fm = eval(&minus, Some(&weights)).0;
            numeric[j] = (fp - fm) / (2.0 * H);
        }
        let err = rel_err(&analytic[which], &numeric);
        assert!(err <= TOL, "{name}: input {which} relative error {err:e} > {TOL:e}");
    }
}

fn rng_for(name: &str) -> coop_numerics::rng::Rng {
    coop_numerics::rng::stream(2026, name)
}

#[test]
fn matmul_gradients() {
    let mut r = rng_for("matmul");
    let a = random_tensor(&mut r, vec![3, 4], 1.0);
    let b = random_tensor(&mut r, vec![4, 5], 1.0);
    gradcheck("matmul", vec![a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn add_gradients_plain_and_broadcast() {
    let mut r = rng_for("add");
    let a = random_tensor(&mut r, vec![3, 4], 1.0);
    let b = random_tensor(&mut r, vec![3, 4], 1.0);
    let bias = random_tensor(&mut r, vec![4], 1.0);
    gradcheck("add", vec![a.clone(), b], |t, v| t.add(v[0], v[1]).unwrap());
    gradcheck("add_broadcast", vec![a, bias], |t, v| t.add(v[0], v[1]).unwrap());
}

#[test]
fn mul_sum_transpose_gradients() {
    let mut r = rng_for("mul");
    let a = random_tensor(&mut r, vec![2, 3], 1.0);
    let b = random_tensor(&mut r, vec![2, 3], 1.0);
    gradcheck("mul", vec![a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap());
    gradcheck("sum", vec![a.clone()], |t, v| t.sum(v[0]).unwrap());
    gradcheck("transpose", vec![a], |t, v| t.transpose(v[0]).unwrap());
}

#[test]
fn layernorm_gradients() {
    let mut r = rng_for("layernorm");
    let x = random_tensor(&mut r, vec![4, 6], 2.0);
    let g = random_tensor(&mut r, vec![6], 1.0);
    let b = random_tensor(&mut r, vec![6], 1.0);
    gradcheck("layernorm", vec![x, g, b], |t, v| t.layernorm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn embedding_gradients() {
    let mut r = rng_for("embedding");
    let table = random_tensor(&mut r, vec![5, 3], 1.0);
    gradcheck("embedding", vec![table], |t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn softmax_gradients() {
    let mut r = rng_for("softmax");
    let x = random_tensor(&mut r, vec![3, 5], 2.0);
    gradcheck("softmax", vec![x], |t, v| t.softmax(v[0]).unwrap());
}

#[test]
fn gelu_gradients() {
    let mut r = rng_for("gelu");
    let x = random_tensor(&mut r, vec![4, 4], 2.0);
    gradcheck("gelu", vec![x], |t, v| t.gelu(v[0]).unwrap());
}

#[test]
fn attention_gradients() {
    let mut r = rng_for("attention");
    // two sequences of length 3, width 4, two heads
    let q = random_tensor(&mut r, vec![6, 4], 1.0);
    let k = random_tensor(&mut r, vec![6, 4], 1.0);
    let v = random_tensor(&mut r, vec![6, 4], 1.0);
    gradcheck("attention", vec![q, k, v], |t, v| t.attention(v[0], v[1], v[2], 2, 3).unwrap());
}

#[test]
fn cross_entropy_gradients() {
    let mut r = rng_for("cross_entropy");
    let logits = random_tensor(&mut r, vec![4, 6], 1.5);
    gradcheck("cross_entropy", vec![logits], |t, v| {
        t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]).unwrap()
    });
}

#[test]
fn gate_mix_gradients() {
    let mut r = rng_for("gate_mix");
    let gates = random_tensor(&mut r, vec![3, 2], 1.0);
    let e0 = random_tensor(&mut r, vec![3, 4], 1.0);
    let e1 = random_tensor(&mut r, vec![3, 4], 1.0);
    gradcheck("gate_mix", vec![gates, e0, e1], |t, v| t.gate_mix(v[0], &[v[1], v[2]]).unwrap());
}

#[test]
fn composed_block_gradients() {
    // A miniature transformer block: norm -> attention -> residual -> mlp -> loss.
    let mut r = rng_for("block");
    let x = random_tensor(&mut r, vec![4, 4], 1.0);
    let g = random_tensor(&mut r, vec![4], 1.0);
    let b = random_tensor(&mut r, vec![4], 0.1);
    let wq = random_tensor(&mut r, vec![4, 4], 0.5);
    let w1 = random_tensor(&mut r, vec![4, 6], 0.5);
    gradcheck("block", vec![x, g, b, wq, w1], |t, v| {
        let h = t.layernorm(v[0], v[1], v[2]).unwrap();
        let q = t.matmul(h, v[3]).unwrap();
        let a = t.attention(q, h, h, 2, 2).unwrap();
        let res = t.add(v[0], a).unwrap();
        let m = t.matmul(res, v[4]).unwrap();
        let act = t.gelu(m).unwrap();
        t.cross_entropy(act, &[Some(0), Some(3), Some(5), Some(1)]).unwrap()
    });
}
