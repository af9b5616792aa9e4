//! Reverse-mode differentiation over a linear tape.
//!
//! Each node stores its forward value plus whatever the backward rule needs.
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its producers.

use std::collections::BTreeMap;

use super::ops::{self, AttnSpec};
use super::params::ParamSet;
use super::scalar::{gemm, Scalar, View};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddTiled { x: Var, y: Var },
    Scale(Var, T),
    ScaleBy { x: Var, s: Var },
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    GroupMean { x: Var, group: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    MultiPositive { logits: Var, n: usize, k: usize, row_probs: Vec<T>, col_probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Differentiation tape. Build a scalar loss with the op methods, then call
/// [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), frozen: Vec::new() }
    }

    /// Parameters whose name starts with any of these prefixes enter the tape
    /// as constants and receive no gradient.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        self.frozen.extend(prefixes.iter().map(|p| p.to_string()));
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers (once) the named parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a · b` (or `a · bᵀ`), contracting the trailing axis of `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(dim_err!("matmul rhs must be a matrix, got {:?}", bv.shape()));
        }
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != bk {
            return Err(dim_err!("matmul inner dimensions differ: {:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()));
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        let bview = if trans_b { View::row_major(0, k).transposed() } else { View::row_major(0, n) };
        gemm(m, k, n, T::one(), av.data(), View::row_major(0, k), bv.data(), bview, T::zero(), out.data_mut(), View::row_major(0, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `x · w + bias` with `w: [in×out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false)?;
        match bias {
            Some(b) => self.add_tiled(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(dim_err!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds the rows of `y` to `x`, repeating `y` down `x`'s rows.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let c = xv.cols();
        if yv.numel() % c != 0 || yv.numel() == 0 || xv.numel() % yv.numel() != 0 {
            return Err(dim_err!("add_tiled: cannot tile {:?} over {:?}", yv.shape(), xv.shape()));
        }
        let mut out = xv.clone();
        let ylen = yv.numel();
        for chunk in out.data_mut().chunks_mut(ylen) {
            for (o, &v) in chunk.iter_mut().zip(yv.data()) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, Op::AddTiled { x, y }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err!("scale_by needs a single-element scale, got {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(dim_err!("layer_norm: affine params must have {d} elements"));
        }
        let mut out = Tensor::zeros(xv.shape());
        let (mut mean, mut rstd) = (Vec::new(), Vec::new());
        ops::layer_norm_forward(xv.data(), d, self.value(gamma).data(), self.value(beta).data(), eps, out.data_mut(), &mut mean, &mut rstd);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg))
    }

    /// Batched multi-head attention; see [`AttnSpec`] for the layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        if kv.cols() != width || vv.shape() != kv.shape() || width % spec.heads != 0 {
            return Err(dim_err!("attention: q{:?} k{:?} v{:?} heads {}", qv.shape(), kv.shape(), vv.shape(), spec.heads));
        }
        if qv.rows() != spec.batch * spec.q_len || kv.rows() != spec.batch * spec.k_len {
            return Err(dim_err!("attention: row counts do not match batch layout {spec:?}"));
        }
        if spec.causal && spec.q_len != spec.k_len {
            return Err(dim_err!("causal attention needs q_len == k_len"));
        }
        if let Some(l) = &spec.key_lens {
            if l.len() != spec.batch {
                return Err(dim_err!("attention: {} key lengths for batch {}", l.len(), spec.batch));
            }
        }
        let mut out = Tensor::zeros(&[spec.batch * spec.q_len, width]);
        let probs = ops::attention_forward(qv.data(), kv.data(), vv.data(), width, &spec, out.data_mut());
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, rg))
    }

    /// Selects rows of `x` (flattened over leading axes) by index.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(dim_err!("gather_rows: index {bad} out of range for {} rows", xv.rows()));
        }
        if idx.is_empty() {
            return Err(dim_err!("gather_rows: empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.value(xs[0]).cols();
        let mut data = Vec::new();
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(dim_err!("concat_rows: column mismatch"));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let rows = data.len() / c;
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if group == 0 || r % group != 0 {
            return Err(dim_err!("group_mean: {r} rows not divisible into groups of {group}"));
        }
        let inv = T::one() / T::from_usize(group).unwrap();
        let mut out = Tensor::zeros(&[r / group, c]);
        for (g, orow) in out.data_mut().chunks_mut(c).enumerate() {
            for i in 0..group {
                for (o, &v) in orow.iter_mut().zip(xv.row(g * group + i)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupMean { x, group }, rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12));
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Symmetric multi-positive InfoNCE over a logit table.
    ///
    /// `logits` is `[n × n·k]`; column `j·k + p` holds caption `p` of item `j`.
    /// Image→text: each row is a softmax over all `n·k` captions and the loss
    /// averages `-log p` over the row's `k` positives. Text→image: each column
    /// is a softmax over the `n` images with its owner as the target. The
    /// result is the mean of the two directional means.
    pub fn multi_positive_nce(&mut self, logits: Var, n: usize, k: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != [n, n * k] {
            return Err(dim_err!("multi_positive_nce: logits {:?}, expected [{n}, {}]", lv.shape(), n * k));
        }
        let nk = n * k;
        let mut row_probs = lv.data().to_vec();
        let mut i2t = T::zero();
        for (i, row) in row_probs.chunks_mut(nk).enumerate() {
            let raw = &lv.data()[i * nk..(i + 1) * nk];
            let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = raw.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let mut acc = T::zero();
            for p in 0..k {
                acc += lse - raw[i * k + p];
            }
            i2t += acc / T::from_usize(k).unwrap();
            ops::softmax_prefix(row, nk);
        }
        let mut col_probs = vec![T::zero(); n * nk];
        let mut t2i = T::zero();
        let mut col = vec![T::zero(); n];
        for c in 0..nk {
            for i in 0..n {
                col[i] = lv.data()[i * nk + c];
            }
            let owner = c / k;
            let max = col.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = col.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            t2i += lse - col[owner];
            ops::softmax_prefix(&mut col, n);
            for i in 0..n {
                col_probs[i * nk + c] = col[i];
            }
        }
        let half = T::lit(0.5);
        let loss = half * (i2t / T::from_usize(n).unwrap() + t2i / T::from_usize(nk).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::MultiPositive { logits, n, k, row_probs, col_probs }, rg))
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    /// Returns the loss node and the number of contributing rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<(Var, usize)> {
        let lv = self.value(logits);
        let (r, v) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(dim_err!("cross_entropy: {} targets for {r} rows", targets.len()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target id {bad} outside vocabulary of {v}")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        let mut count = 0;
        for (row, t) in probs.chunks_mut(v).zip(&targets) {
            if let Some(t) = *t {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
                count += 1;
                ops::softmax_prefix(row, v);
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        let rg = self.rg(logits);
        Ok((self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }, rg), count))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::from_usize(xv.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Back-propagates from the single-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.rg(*a) {
                    let bview = if *trans_b { View::row_major(0, k) } else { View::row_major(0, n).transposed() };
                    let da = slot(grads, *a, av.shape());
                    gemm(m, n, k, T::one(), gd, View::row_major(0, n), bv.data(), bview, T::one(), da, View::row_major(0, k));
                }
                if self.rg(*b) {
                    let db = slot(grads, *b, bv.shape());
                    if *trans_b {
                        // d(bᵀ) = aᵀ·g  →  db = gᵀ·a  [n×k]
                        gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gd,
                            View::row_major(0, n).transposed(),
                            av.data(),
                            View::row_major(0, k),
                            T::one(),
                            db,
                            View::row_major(0, k),
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data(),
                            View::row_major(0, k).transposed(),
                            gd,
                            View::row_major(0, n),
                            T::one(),
                            db,
                            View::row_major(0, n),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let shape = self.shape(v).to_vec();
                        add_into(slot(grads, v, &shape), gd);
                    }
                }
            }
            Op::AddTiled { x, y } => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    add_into(slot(grads, *x, &shape), gd);
                }
                if self.rg(*y) {
                    let shape = self.shape(*y).to_vec();
                    let ylen = self.value(*y).numel();
                    let dy = slot(grads, *y, &shape);
                    for chunk in gd.chunks(ylen) {
                        add_into(dy, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                let shape = self.shape(*x).to_vec();
                let dx = slot(grads, *x, &shape);
                for (d, &gv) in dx.iter_mut().zip(gd) {
                    *d += gv * *c;
                }
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let dx = slot(grads, *x, &shape);
                    for (d, &gv) in dx.iter_mut().zip(gd) {
                        *d += gv * c;
                    }
                }
                if self.rg(*s) {
                    let dot: T = self.value(*x).data().iter().zip(gd).map(|(&a, &b)| a * b).sum();
                    let shape = self.shape(*s).to_vec();
                    slot(grads, *s, &shape)[0] += dot;
                }
            }
            Op::Exp(x) => {
                let shape = self.shape(*x).to_vec();
                let y = node.value.data();
                let dx = slot(grads, *x, &shape);
                for ((d, &gv), &yv) in dx.iter_mut().zip(gd).zip(y) {
                    *d += gv * yv;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let shape = self.shape(*x).to_vec();
                let dx = slot(grads, *x, &shape);
                for ((d, &gv), &xi) in dx.iter_mut().zip(gd).zip(xv) {
                    *d += gv * ops::gelu_grad(xi);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let gam = self.value(*gamma).data().to_vec();
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut dgam = self.rg(*gamma).then(|| vec![T::zero(); d]);
                let mut dbet = self.rg(*beta).then(|| vec![T::zero(); d]);
                ops::layer_norm_backward(xv.data(), d, &gam, mean, rstd, gd, dx.as_deref_mut(), dgam.as_deref_mut(), dbet.as_deref_mut());
                for (v, buf) in [(*x, dx), (*gamma, dgam), (*beta, dbet)] {
                    if let Some(buf) = buf {
                        let shape = self.shape(v).to_vec();
                        add_into(slot(grads, v, &shape), &buf);
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.cols();
                let mut dq = self.rg(*q).then(|| vec![T::zero(); qv.numel()]);
                let mut dk = self.rg(*k).then(|| vec![T::zero(); kv.numel()]);
                let mut dv = self.rg(*v).then(|| vec![T::zero(); vv.numel()]);
                ops::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    gd,
                    width,
                    spec,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = buf {
                        let shape = self.shape(var).to_vec();
                        add_into(slot(grads, var, &shape), &buf);
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = g.cols();
                let shape = self.shape(*x).to_vec();
                let dx = slot(grads, *x, &shape);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.rg(x) {
                        let shape = self.shape(x).to_vec();
                        add_into(slot(grads, x, &shape), &gd[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GroupMean { x, group } => {
                let c = g.cols();
                let inv = T::one() / T::from_usize(*group).unwrap();
                let shape = self.shape(*x).to_vec();
                let dx = slot(grads, *x, &shape);
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    let grow = &gd[(r / group) * c..(r / group + 1) * c];
                    for (d, &gv) in row.iter_mut().zip(grow) {
                        *d += gv * inv;
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = g.cols();
                let shape = self.shape(*x).to_vec();
                let dx = slot(grads, *x, &shape);
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += (gr[j] - yr[j] * dot) / nrm;
                    }
                }
            }
            Op::MultiPositive { logits, n, k, row_probs, col_probs } => {
                let (n, k) = (*n, *k);
                let nk = n * k;
                let gl = gd[0];
                let half = T::lit(0.5);
                let wr = gl * half / T::from_usize(n).unwrap();
                let wc = gl * half / T::from_usize(nk).unwrap();
                let invk = T::one() / T::from_usize(k).unwrap();
                let shape = self.shape(*logits).to_vec();
                let dl = slot(grads, *logits, &shape);
                for i in 0..n {
                    for c in 0..nk {
                        let pos = if c / k == i { invk } else { T::zero() };
                        let own = if c / k == i { T::one() } else { T::zero() };
                        dl[i * nk + c] += wr * (row_probs[i * nk + c] - pos) + wc * (col_probs[i * nk + c] - own);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let w = gd[0] / T::from_usize(*count).unwrap();
                let v = self.value(*logits).cols();
                let shape = self.shape(*logits).to_vec();
                let dl = slot(grads, *logits, &shape);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            let ind = if j == t { T::one() } else { T::zero() };
                            dl[r * v + j] += w * (probs[r * v + j] - ind);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                slot(grads, *x, &shape).iter_mut().for_each(|d| *d += gd[0]);
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                slot(grads, *x, &shape).iter_mut().for_each(|d| *d += gd[0] / n);
            }
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter registered on the tape. Parameters that
    /// did not influence the loss (or were frozen) are absent.
    pub fn params(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, v) in &self.params {
            if let Some(t) = &self.grads[v.0] {
                out.set(name, t.clone());
            }
        }
        out
    }
}
