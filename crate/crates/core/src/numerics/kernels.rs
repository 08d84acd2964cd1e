//! Value-level kernels. The tape in [`super::tape`] calls these for both the
//! forward pass and the adjoint rules, so every reduction runs in one fixed
//! order and repeated runs are bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::dim(op, t.shape(), other.shape()));
    }
    Ok(())
}

/// `out[M×N] += A · b` where `a(i, p)` reads `A[i][p]` and `b` is `K×N`
/// row-major. Rows are processed four at a time so each `b` row is loaded
/// once per block; every output still accumulates over `p` in ascending
/// order.
fn gemm_into<T: Scalar>(out: &mut [T], m: usize, n: usize, k: usize, a: impl Fn(usize, usize) -> T, b: &[T]) {
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a(i, p), a(i + 1, p), a(i + 2, p), a(i + 3, p));
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a(i, p);
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_matrix("matmul", a, b)?;
    require_matrix("matmul", b, a)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    gemm_into(&mut out, m, n, k, |i, p| ad[i * k + p], b.data());
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a[K×M]`, `b[K×N]`.
pub(crate) fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    gemm_into(&mut out, m, n, k, |i, p| ad[p * m + i], b.data());
    Tensor::new(vec![m, n], out).expect("matmul_tn shape")
}

/// `a · bᵀ` for `a[M×K]`, `b[N×K]`.
pub(crate) fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let bt = b.transpose();
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    gemm_into(&mut out, m, n, k, |i, p| ad[i * k + p], bt.data());
    Tensor::new(vec![m, n], out).expect("matmul_nt shape")
}

/// Softmax over the last axis, shifted by the row maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Cached statistics from a layer-norm forward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise layer normalization over the last axis followed by the affine
/// map `gamma * xhat + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_cached<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let dn = T::from_usize_lossy(d);
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for (xr, (hr, or)) in x
        .data()
        .chunks(d)
        .zip(xhat.data_mut().chunks_mut(d).zip(out.data_mut().chunks_mut(d)))
    {
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..d {
            let h = (xr[c] - mean) * istd;
            hr[c] = h;
            or[c] = gamma.data()[c] * h + beta.data()[c];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Probability weights of scaled dot-product attention for one head block:
/// `softmax(q kᵀ · scale)` over key rows.
pub(crate) fn attention_weights<T: Scalar>(
    q: &[T],
    k: &[T],
    nq: usize,
    nk: usize,
    width: usize,
    stride: usize,
    offset: usize,
    scale: T,
) -> Vec<T> {
    let mut w = vec![T::zero(); nq * nk];
    for i in 0..nq {
        let qi = &q[i * stride + offset..i * stride + offset + width];
        let row = &mut w[i * nk..(i + 1) * nk];
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * stride + offset..j * stride + offset + width];
            let mut acc = T::zero();
            for (&a, &b) in qi.iter().zip(kj) {
                acc += a * b;
            }
            *r = acc * scale;
        }
        softmax_in_place(row);
    }
    w
}

/// Multi-head scaled dot-product attention. Returns the output and the
/// per-head weight matrices (head-major, each `nq × nk`).
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = q.cols();
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::dim("attention", k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let (nq, nk) = (q.shape()[0], k.shape()[0]);
    let width = d / heads;
    let scale = T::one() / T::from_usize_lossy(width).sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut all_weights = Vec::with_capacity(heads * nq * nk);
    for h in 0..heads {
        let off = h * width;
        let w = attention_weights(q.data(), k.data(), nq, nk, width, d, off, scale);
        for i in 0..nq {
            let orow = &mut out[i * d + off..i * d + off + width];
            for j in 0..nk {
                let p = w[i * nk + j];
                let vrow = &v.data()[j * d + off..j * d + off + width];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
        all_weights.extend_from_slice(&w);
    }
    Ok((Tensor::new(vec![nq, d], out)?, all_weights))
}
