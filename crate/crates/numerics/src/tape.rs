//! Gradient tape. Nodes are appended in evaluation order, so the node list is
//! already a topological order and backward is a single reverse sweep.

use crate::error::{NumericsError, OpKind, Result};
use crate::kernels::{
    axpy, dot, gelu, gelu_grad, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc,
    softmax_rows_in_place, transpose,
};
use crate::tensor::Tensor;

/// Layer-norm variance floor. Small enough that normalized rows have unit
/// variance to well under 1e-6 for any row with non-degenerate spread.
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Additive mask value for future positions in causal attention.
pub const CAUSAL_MASK: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Mul(Var, Var),
    Sum(Var),
    Transpose(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    GateMix { gates: Var, experts: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Non-finite data is rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: OpKind::Leaf, input: 0 });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_finite(&self, op: OpKind, vars: &[Var]) -> Result<()> {
        for (input, v) in vars.iter().enumerate() {
            if !self.nodes[v.0].value.all_finite() {
                return Err(NumericsError::NonFinite { op, input });
            }
        }
        Ok(())
    }

    fn dims2(&self, op: OpKind, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("expected a 2-D tensor, got {other:?}"),
            }),
        }
    }

    fn mismatch(op: OpKind, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch { op, detail }
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: OpKind = OpKind::MatMul;
        self.check_finite(OP, &[a, b])?;
        let (m, k) = self.dims2(OP, a)?;
        let (k2, n) = self.dims2(OP, b)?;
        if k != k2 {
            return Err(Self::mismatch(OP, format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Elementwise sum of equal shapes, or a row vector broadcast over a matrix.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        const OP: OpKind = OpKind::Add;
        self.check_finite(OP, &[lhs, rhs])?;
        let ls = self.value(lhs).shape().to_vec();
        let rs = self.value(rhs).shape().to_vec();
        let broadcast = if ls == rs {
            false
        } else if rs.len() == 1 && ls.len() == 2 && ls[1] == rs[0] {
            true
        } else {
            return Err(Self::mismatch(OP, format!("{ls:?} + {rs:?}")));
        };
        let mut out = self.value(lhs).data().to_vec();
        let r = self.value(rhs).data();
        if broadcast {
            for row in out.chunks_exact_mut(rs[0]) {
                for (o, &b) in row.iter_mut().zip(r) {
                    *o += b;
                }
            }
        } else {
            for (o, &b) in out.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(ls, out)?, rg, Op::Add { lhs, rhs, broadcast }))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: OpKind = OpKind::Mul;
        self.check_finite(OP, &[a, b])?;
        let sa = self.value(a).shape().to_vec();
        if sa != self.value(b).shape() {
            return Err(Self::mismatch(OP, format!("{sa:?} * {:?}", self.value(b).shape())));
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, rg, Op::Mul(a, b)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_finite(OpKind::Sum, &[x])?;
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        const OP: OpKind = OpKind::Transpose;
        self.check_finite(OP, &[x])?;
        let (r, c) = self.dims2(OP, x)?;
        let out = transpose(self.value(x).data(), r, c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, rg, Op::Transpose(x)))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const OP: OpKind = OpKind::LayerNorm;
        self.check_finite(OP, &[x, gain, bias])?;
        let (rows, cols) = self.dims2(OP, x)?;
        for p in [gain, bias] {
            if self.value(p).shape() != [cols] {
                return Err(Self::mismatch(
                    OP,
                    format!("row width {cols} vs affine shape {:?}", self.value(p).shape()),
                ));
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            rg,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Gathers rows of `table` (`[vocab, width]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        const OP: OpKind = OpKind::EmbeddingLookup;
        self.check_finite(OP, &[table])?;
        let (vocab, width) = self.dims2(OP, table)?;
        if ids.is_empty() {
            return Err(Self::mismatch(OP, "empty id list".into()));
        }
        if let Some((position, &index)) = ids.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(NumericsError::IndexOutOfRange { op: OP, index, limit: vocab, position });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), width], out)?,
            rg,
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        const OP: OpKind = OpKind::Softmax;
        self.check_finite(OP, &[x])?;
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).data().to_vec();
        softmax_rows_in_place(&mut out, cols);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax(x)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_finite(OpKind::Gelu, &[x])?;
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Gelu(x)))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, width]` with sequences stacked
    /// row-wise; heads split `width` into equal contiguous slices. Position
    /// `t` attends to positions `0..=t` of its own sequence; later positions
    /// receive the additive [`CAUSAL_MASK`], which underflows to exactly zero
    /// weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        const OP: OpKind = OpKind::ScaledDotAttention;
        self.check_finite(OP, &[q, k, v])?;
        let (rows, width) = self.dims2(OP, q)?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, width] {
                return Err(Self::mismatch(
                    OP,
                    format!("q {:?} vs {:?}", [rows, width], self.value(other).shape()),
                ));
            }
        }
        if heads == 0 || width % heads != 0 {
            return Err(Self::mismatch(OP, format!("width {width} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Self::mismatch(OP, format!("{rows} rows not a multiple of seq_len {seq_len}")));
        }
        let batch = rows / seq_len;
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq_len * seq_len;
                for t in 0..seq_len {
                    let qr = (b * seq_len + t) * width + off;
                    let qrow = &qd[qr..qr + hd];
                    let mut max = f64::NEG_INFINITY;
                    for (u, s) in scores.iter_mut().enumerate() {
                        if u > t {
                            *s = CAUSAL_MASK;
                            continue;
                        }
                        let kr = (b * seq_len + u) * width + off;
                        let val = dot(qrow, &kd[kr..kr + hd]) * scale;
                        *s = val;
                        max = max.max(val);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let prow = &mut probs[pbase + t * seq_len..pbase + (t + 1) * seq_len];
                    let orow_start = (b * seq_len + t) * width + off;
                    for (u, s) in scores.iter().enumerate() {
                        let p = s / total;
                        prow[u] = p;
                        if p != 0.0 {
                            let vr = (b * seq_len + u) * width + off;
                            axpy(&mut out[orow_start..orow_start + hd], p, &vd[vr..vr + hd]);
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            rg,
            Op::Attention { q, k, v, heads, seq_len, probs },
        ))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        const OP: OpKind = OpKind::CrossEntropy;
        self.check_finite(OP, &[logits])?;
        let (rows, vocab) = self.dims2(OP, logits)?;
        if targets.len() != rows {
            return Err(Self::mismatch(OP, format!("{rows} logit rows vs {} targets", targets.len())));
        }
        if let Some((position, index)) = targets
            .iter()
            .enumerate()
            .find_map(|(p, t)| t.filter(|&t| t >= vocab).map(|t| (p, t)))
        {
            return Err(NumericsError::IndexOutOfRange { op: OP, index, limit: vocab, position });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Self::mismatch(OP, "no scored targets".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows_in_place(&mut probs, vocab);
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = &ld[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let loss = total / count as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
        ))
    }

    /// Gate-weighted sum of expert rows: `out[r] = Σᵢ gates[r,i] · expertᵢ[r]`.
    pub fn gate_mix(&mut self, gates: Var, experts: &[Var]) -> Result<Var> {
        const OP: OpKind = OpKind::GateMix;
        let mut all = vec![gates];
        all.extend_from_slice(experts);
        self.check_finite(OP, &all)?;
        let (rows, n) = self.dims2(OP, gates)?;
        if n != experts.len() || n == 0 {
            return Err(Self::mismatch(OP, format!("{n} gate columns vs {} experts", experts.len())));
        }
        let (er, width) = self.dims2(OP, experts[0])?;
        for &e in experts {
            if self.value(e).shape() != [er, width] || er != rows {
                return Err(Self::mismatch(
                    OP,
                    format!("gates [{rows}, {n}] vs expert {:?}", self.value(e).shape()),
                ));
            }
        }
        let gd = self.value(gates).data();
        let mut out = vec![0.0; rows * width];
        for (i, &e) in experts.iter().enumerate() {
            let ed = self.value(e).data();
            for r in 0..rows {
                let g = gd[r * n + i];
                if g != 0.0 {
                    axpy(&mut out[r * width..(r + 1) * width], g, &ed[r * width..(r + 1) * width]);
                }
            }
        }
        let rg = self.any_grad(&all);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            rg,
            Op::GateMix { gates, experts: experts.to_vec() },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of every grad-requiring node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (target, contrib) in contributions {
                debug_assert!(target.0 < i, "tape order violated");
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(existing) => axpy(existing, 1.0, &contrib),
                    None => node.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt_acc(&mut da, g, self.value(*b).data(), m, k, n);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b_acc(&mut db, self.value(*a).data(), g, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::Add { lhs, rhs, broadcast } => {
                if self.wants(*lhs) {
                    out.push((*lhs, g.to_vec()));
                }
                if self.wants(*rhs) {
                    if *broadcast {
                        let cols = self.value(*rhs).len();
                        let mut db = vec![0.0; cols];
                        for row in g.chunks_exact(cols) {
                            axpy(&mut db, 1.0, row);
                        }
                        out.push((*rhs, db));
                    } else {
                        out.push((*rhs, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bd).map(|(g, b)| g * b).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(ad).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = self.value(*x).dims2().expect("2-D");
                    out.push((*x, transpose(g, c, r)));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).len();
                let rows = rstd.len();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; cols];
                    for row in g.chunks_exact(cols) {
                        axpy(&mut db, 1.0, row);
                    }
                    out.push((*bias, db));
                }
                if self.wants(*x) {
                    let gd = self.value(*gain).data();
                    let mut dx = vec![0.0; rows * cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            dxhat[c] = g[base + c] * gd[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, &xhat[base..base + cols]) / cols as f64;
                        for c in 0..cols {
                            dx[base + c] =
                                rstd[r] * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let width = self.value(*table).shape()[1];
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * width..(id + 1) * width], 1.0, &g[r * width..(r + 1) * width]);
                    }
                    out.push((*table, dt));
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("shape");
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in
                        dx.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(g.chunks_exact(cols))
                    {
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            dr[c] = yr[c] * (gr[c] - s);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    out.push((*x, xd.iter().zip(g).map(|(&v, &g)| g * gelu_grad(v)).collect()));
                }
            }
            Op::Attention { q, k, v, heads, seq_len, probs } => {
                out.extend(self.attention_grads(*q, *k, *v, *heads, *seq_len, probs, g));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).shape()[1];
                    let scale = g[0] / *count as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let base = r * vocab;
                            for c in 0..vocab {
                                dl[base + c] = probs[base + c] * scale;
                            }
                            dl[base + t] -= scale;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::GateMix { gates, experts } => {
                let (rows, n) = self.value(*gates).dims2().expect("2-D");
                let width = node.value.shape()[1];
                let gd = self.value(*gates).data();
                if self.wants(*gates) {
                    let mut dg = vec![0.0; rows * n];
                    for (i, &e) in experts.iter().enumerate() {
                        let ed = self.value(e).data();
                        for r in 0..rows {
                            dg[r * n + i] =
                                dot(&g[r * width..(r + 1) * width], &ed[r * width..(r + 1) * width]);
                        }
                    }
                    out.push((*gates, dg));
                }
                for (i, &e) in experts.iter().enumerate() {
                    if self.wants(e) {
                        let mut de = vec![0.0; rows * width];
                        for r in 0..rows {
                            axpy(&mut de[r * width..(r + 1) * width], gd[r * n + i], &g[r * width..(r + 1) * width]);
                        }
                        out.push((e, de));
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (rows, width) = self.value(q).dims2().expect("2-D");
        let batch = rows / seq_len;
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq_len * seq_len;
                for t in 0..seq_len {
                    let row_t = (b * seq_len + t) * width + off;
                    let go = &g[row_t..row_t + hd];
                    let prow = &probs[pbase + t * seq_len..pbase + (t + 1) * seq_len];
                    // dP[t,u] = dO_t · v_u ;  dV_u += P[t,u] dO_t
                    let mut weighted = 0.0;
                    for u in 0..=t {
                        let row_u = (b * seq_len + u) * width + off;
                        dp[u] = dot(go, &vd[row_u..row_u + hd]);
                        weighted += prow[u] * dp[u];
                        if prow[u] != 0.0 {
                            axpy(&mut dv[row_u..row_u + hd], prow[u], go);
                        }
                    }
                    for u in 0..=t {
                        let ds = prow[u] * (dp[u] - weighted) * scale;
                        if ds != 0.0 {
                            let row_u = (b * seq_len + u) * width + off;
                            axpy(&mut dq[row_t..row_t + hd], ds, &kd[row_u..row_u + hd]);
                            axpy(&mut dk[row_u..row_u + hd], ds, &qd[row_t..row_t + hd]);
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        if self.wants(q) {
            out.push((q, dq));
        }
        if self.wants(k) {
            out.push((k, dk));
        }
        if self.wants(v) {
            out.push((v, dv));
        }
        out
    }
}
