//! Forward and backward kernels shared by the eager API and the tape.
//!
//! Reductions run sequentially in row-major order so that results are
//! bit-reproducible for identical inputs.

use super::scalar::{gemm, Scalar, View};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Numerically stable in-place softmax over `row[..valid]`; entries past
/// `valid` are set to zero.
pub fn softmax_prefix<T: Scalar>(row: &mut [T], valid: usize) {
    if valid == 0 {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v /= sum;
    }
    for v in &mut row[valid..] {
        *v = T::zero();
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_prefix(row, c);
    }
    out
}

/// Per-row normalisation statistics `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    mean: &mut Vec<T>,
    rstd: &mut Vec<T>,
) {
    let dn = T::from_usize(d).unwrap();
    mean.clear();
    rstd.clear();
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mu = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
}

/// Accumulates layer-norm input and affine gradients.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let dn = T::from_usize(d).unwrap();
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for (r, (xr, gr)) in x.chunks(d).zip(dout.chunks(d)).enumerate() {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mu) * rs;
            let g = gr[j] * gamma[j];
            sum_g += g;
            sum_gx += g * xhat;
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[j] += gr[j] * xhat;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[j] += gr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let row = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                let xhat = (xr[j] - mu) * rs;
                let g = gr[j] * gamma[j];
                row[j] += rs * (g - sum_g / dn - xhat * sum_gx / dn);
            }
        }
    }
}

/// Eager layer normalisation over the trailing axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(dim_err!("layer_norm: affine params must have {d} elements"));
    }
    let mut out = Tensor::zeros(x.shape());
    let (mut mean, mut rstd) = (Vec::new(), Vec::new());
    layer_norm_forward(x.data(), d, gamma.data(), beta.data(), eps, out.data_mut(), &mut mean, &mut rstd);
    Ok(out)
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are laid out as `[batch·q_len × width]`, keys and values as
/// `[batch·k_len × width]`; head `h` owns columns `h·dh .. (h+1)·dh`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Number of valid (non-padding) keys per batch item.
    pub key_lens: Option<Vec<usize>>,
}

impl AttnSpec {
    pub fn single(q_len: usize, k_len: usize, causal: bool) -> Self {
        AttnSpec { batch: 1, q_len, k_len, heads: 1, causal, key_lens: None }
    }

    fn valid_keys(&self, b: usize, i: usize) -> usize {
        let mut n = self.key_lens.as_ref().map_or(self.k_len, |l| l[b].min(self.k_len));
        if self.causal {
            n = n.min(i + 1);
        }
        n
    }
}

/// Forward pass; returns the attention probabilities `[batch, heads, q_len, k_len]`.
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], width: usize, spec: &AttnSpec, out: &mut [T]) -> Vec<T> {
    let AttnSpec { batch, q_len, k_len, heads, .. } = *spec;
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * q_len * k_len;
            let qv = View::row_major(b * q_len * width + h * dh, width);
            let kv = View::row_major(b * k_len * width + h * dh, width).transposed();
            gemm(q_len, dh, k_len, scale, q, qv, k, kv, T::zero(), &mut probs, View::row_major(p_off, k_len));
            for i in 0..q_len {
                let row = &mut probs[p_off + i * k_len..p_off + (i + 1) * k_len];
                softmax_prefix(row, spec.valid_keys(b, i));
            }
            let vv = View::row_major(b * k_len * width + h * dh, width);
            let ov = View::row_major(b * q_len * width + h * dh, width);
            gemm(q_len, k_len, dh, T::one(), &probs, View::row_major(p_off, k_len), v, vv, T::zero(), out, ov);
        }
    }
    probs
}

/// Accumulates gradients of attention inputs given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    width: usize,
    spec: &AttnSpec,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let AttnSpec { batch, q_len, k_len, heads, .. } = *spec;
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ds = vec![T::zero(); q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * q_len * k_len;
            let pv = View::row_major(p_off, k_len);
            let qv = View::row_major(b * q_len * width + h * dh, width);
            let kvw = View::row_major(b * k_len * width + h * dh, width);
            if let Some(dv) = dv.as_deref_mut() {
                gemm(k_len, q_len, dh, T::one(), probs, pv.transposed(), dout, qv, T::one(), dv, kvw);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO · Vᵀ
            gemm(q_len, dh, k_len, T::one(), dout, qv, v, kvw.transposed(), T::zero(), &mut ds, View::row_major(0, k_len));
            for i in 0..q_len {
                let prow = &probs[p_off + i * k_len..p_off + (i + 1) * k_len];
                let drow = &mut ds[i * k_len..(i + 1) * k_len];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(q_len, k_len, dh, scale, &ds, View::row_major(0, k_len), k, kvw, T::one(), dq, qv);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(k_len, q_len, dh, scale, &ds, View::row_major(0, k_len).transposed(), q, qv, T::one(), dk, kvw);
            }
        }
    }
}

/// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    if q.shape().len() != 2 || k.shape() != v.shape() || k.cols() != d {
        return Err(dim_err!("attention shapes q{:?} k{:?} v{:?} are incompatible", q.shape(), k.shape(), v.shape()));
    }
    if causal && n != m {
        return Err(dim_err!("causal attention needs equal query and key lengths ({n} vs {m})"));
    }
    let mut out = Tensor::zeros(&[n, d]);
    attention_forward(q.data(), k.data(), v.data(), d, &AttnSpec::single(n, m, causal), out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_prefix_zeroes_masked_tail() {
        let mut row = [1.0f64, 2.0, 30.0];
        softmax_prefix(&mut row, 2);
        assert_eq!(row[2], 0.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
    }
}
