//! Slice-level kernels shared by the eager tensor ops and the tape.
//!
//! Every reduction runs sequentially in index order, so results are
//! bitwise reproducible.

use crate::numerics::Scalar;

/// `a[m×k] · b[k×n]`; each output accumulates over `k` in order.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax over the middle axis of an `[outer, len, inner]` view.
pub fn softmax<F: Scalar>(x: &[F], outer: usize, len: usize, inner: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

/// Per-row normalization to zero mean and unit variance. Rows whose entries
/// are all equal map to exactly zero. Returns the output and `1/sqrt(var+eps)`.
pub fn normalize_rows<F: Scalar>(x: &[F], width: usize, eps: f64) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / width;
    let mut out = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let n = F::of(width as f64);
    let eps = F::of(eps);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std.push(inv);
        if row.iter().all(|&v| v == row[0]) {
            continue;
        }
        for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (out, inv_std)
}

pub fn normalize_rows_backward<F: Scalar>(y: &[F], inv_std: &[F], dy: &[F], width: usize) -> Vec<F> {
    let n = F::of(width as f64);
    let mut dx = vec![F::zero(); y.len()];
    for (r, &inv) in inv_std.iter().enumerate() {
        let span = r * width..(r + 1) * width;
        let (yr, dyr) = (&y[span.clone()], &dy[span.clone()]);
        let mean_dy = dyr.iter().copied().sum::<F>() / n;
        let mean_dyy = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<F>() / n;
        for ((d, &yv), &g) in dx[span].iter_mut().zip(yr).zip(dyr) {
            *d = inv * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    None,
    /// Row-major `[lq × lk]` mask shared by every batch entry and head.
    Shared(Vec<bool>),
    /// Per batch entry, only the first `len` keys are visible.
    KeyLengths(Vec<usize>),
}

impl AttnMask {
    #[inline]
    fn visible(&self, b: usize, i: usize, j: usize, lk: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Shared(m) => m[i * lk + j],
            AttnMask::KeyLengths(l) => j < l[b],
        }
    }
}

/// Layout of a multi-head attention call: q is `[batch·lq, heads·head_dim]`,
/// k and v are `[batch·lk, heads·head_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Returns the output and the attention probabilities `[batch, heads, lq, lk]`.
pub fn attention<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: AttnDims,
    mask: &AttnMask,
) -> (Vec<F>, Vec<F>) {
    let w = d.width();
    let scale = F::of(1.0 / (d.head_dim as f64).sqrt());
    let mut out = vec![F::zero(); d.batch * d.lq * w];
    let mut probs = vec![F::zero(); d.batch * d.heads * d.lq * d.lk];
    let mut scores = vec![F::zero(); d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * d.head_dim;
            for i in 0..d.lq {
                let qi = &q[(b * d.lq + i) * w + off..][..d.head_dim];
                let mut max = F::neg_infinity();
                for j in 0..d.lk {
                    if !mask.visible(b, i, j, d.lk) {
                        continue;
                    }
                    let kj = &k[(b * d.lk + j) * w + off..][..d.head_dim];
                    let mut s = F::zero();
                    for (&x, &y) in qi.iter().zip(kj) {
                        s += x * y;
                    }
                    s *= scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let p = &mut probs[((b * d.heads + h) * d.lq + i) * d.lk..][..d.lk];
                let mut sum = F::zero();
                for j in 0..d.lk {
                    if mask.visible(b, i, j, d.lk) {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                }
                let o = &mut out[(b * d.lq + i) * w + off..][..d.head_dim];
                for j in 0..d.lk {
                    if !mask.visible(b, i, j, d.lk) {
                        continue;
                    }
                    p[j] = p[j] / sum;
                    let vj = &v[(b * d.lk + j) * w + off..][..d.head_dim];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov += p[j] * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of the attention output with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    d: AttnDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let w = d.width();
    let scale = F::of(1.0 / (d.head_dim as f64).sqrt());
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    let mut dp = vec![F::zero(); d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * d.head_dim;
            for i in 0..d.lq {
                let p = &probs[((b * d.heads + h) * d.lq + i) * d.lk..][..d.lk];
                let doi = &dout[(b * d.lq + i) * w + off..][..d.head_dim];
                let mut dot = F::zero();
                for j in 0..d.lk {
                    if p[j] == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    let vrow = (b * d.lk + j) * w + off;
                    let mut s = F::zero();
                    for c in 0..d.head_dim {
                        s += doi[c] * v[vrow + c];
                        dv[vrow + c] += p[j] * doi[c];
                    }
                    dp[j] = s;
                    dot += p[j] * s;
                }
                let qrow = (b * d.lq + i) * w + off;
                for j in 0..d.lk {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (b * d.lk + j) * w + off;
                    for c in 0..d.head_dim {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
