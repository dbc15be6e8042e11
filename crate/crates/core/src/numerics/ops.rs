//! Eager tensor operations (no tape).

use crate::error::{shape_err, Error, Result};
use crate::numerics::graph::{axis_split, validate_mask};
use crate::numerics::kernels::{self, AttnDims, AttnMask};
use crate::numerics::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    Tensor::new(x.shape(), kernels::softmax(x.data(), outer, len, inner))
}

/// Layer normalization over the last axis. Constant rows normalize to zero
/// before the affine part.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
    let w = x.cols();
    if gamma.numel() != w || beta.numel() != w {
        return Err(shape_err("layer_norm affine parameters must match the last axis"));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let (mut y, _) = kernels::normalize_rows(x.data(), w, eps);
    for row in y.chunks_mut(w) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape(), y)
}

/// Converts a `{0,1}`-valued `[lq × lk]` tensor into an attention mask.
pub fn mask_from_tensor<F: Scalar>(mask: &Tensor<F>) -> Result<AttnMask> {
    if mask.rank() != 2 {
        return Err(shape_err(format!("mask must be 2-D, got {:?}", mask.shape())));
    }
    let mut bits = Vec::with_capacity(mask.numel());
    for &m in mask.data() {
        if m == F::one() {
            bits.push(true);
        } else if m == F::zero() {
            bits.push(false);
        } else {
            return Err(shape_err("mask entries must be 0 or 1"));
        }
    }
    Ok(AttnMask::Shared(bits))
}

/// `softmax(q kᵀ/√d + log mask) v` for `q, k, v` of shape `[G, L, d]`
/// (or `[L, d]`). Masked entries are skipped outright, so an all-ones
/// mask gives bitwise the same result as no mask.
pub fn attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let dims_of = |t: &Tensor<F>| -> Result<(usize, usize, usize)> {
        match *t.shape() {
            [l, d] => Ok((1, l, d)),
            [g, l, d] => Ok((g, l, d)),
            _ => Err(shape_err(format!("attention operand must be [G, L, d], got {:?}", t.shape()))),
        }
    };
    let (gq, lq, dq) = dims_of(q)?;
    let (gk, lk, dk) = dims_of(k)?;
    if k.shape() != v.shape() || gq != gk || dq != dk {
        return Err(shape_err(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let dims = AttnDims { batch: gq, lq, lk, heads: 1, head_dim: dq };
    let mask = match mask {
        Some(m) => {
            if m.shape() != [lq, lk] {
                return Err(shape_err(format!("mask shape {:?}, expected [{lq}, {lk}]", m.shape())));
            }
            mask_from_tensor(m)?
        }
        None => AttnMask::None,
    };
    validate_mask(&mask, dims)?;
    let (out, _) = kernels::attention(q.data(), k.data(), v.data(), dims, &mask);
    Tensor::new(q.shape(), out)
}
