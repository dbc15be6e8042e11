//! Text-to-video pieces: frame/patch rearrangement, temporal
//! self-attention, the motion-free mask, pseudo-videos, and inflation of an
//! image model.

use crate::error::{shape_err, Error, Result};
use crate::model::layers::{AttentionParams, Norm};
use crate::model::params::{Init, LayoutBuilder, ParamStore};
use crate::model::GenTron;
use crate::numerics::ops::mask_from_tensor;
use crate::numerics::{AttnMask, Graph, Rng, Scalar, Tensor, Var};

/// Frames of `clips` clips in `(clip, frame)` order along the leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    pub frames: Tensor,
    pub clips: usize,
    pub frames_per_clip: usize,
    /// Every clip is one image repeated.
    pub is_motion_free: bool,
}

impl VideoBatch {
    pub fn new(frames: Tensor, clips: usize, frames_per_clip: usize, is_motion_free: bool) -> Result<Self> {
        if frames.shape()[0] != clips * frames_per_clip {
            return Err(shape_err(format!(
                "leading extent {} is not {clips}·{frames_per_clip}",
                frames.shape()[0]
            )));
        }
        Ok(Self { frames, clips, frames_per_clip, is_motion_free })
    }

    /// Frame `f` of clip `c`.
    pub fn frame(&self, c: usize, f: usize) -> Result<Tensor> {
        let t = self.frames.slice_leading(c * self.frames_per_clip + f, 1)?;
        let shape = t.shape()[1..].to_vec();
        t.reshape(&shape)
    }
}

/// A clip of `t` copies of `image` (the image plus `t − 1` repeats).
pub fn pseudo_video(image: &Tensor, t: usize) -> Result<VideoBatch> {
    if t == 0 {
        return Err(Error::Config("pseudo-video needs at least one frame".into()));
    }
    let mut shape = vec![t];
    shape.extend_from_slice(image.shape());
    let data = image.data().repeat(t);
    VideoBatch::new(Tensor::new(&shape, data)?, 1, t, true)
}

/// Identity `[t, t]` mask: each frame attends only to itself.
pub fn motion_free_mask(t: usize) -> Tensor {
    Tensor::eye(t)
}

/// All-ones `[t, t]` mask: full temporal attention.
pub fn full_motion_mask(t: usize) -> Tensor {
    Tensor::ones(&[t, t])
}

/// Row permutation `(b t) n → (b n) t`: output row `(β·n + ν)·t + τ`
/// takes input row `(β·t + τ)·n + ν`.
pub fn temporal_rows(b: usize, t: usize, n: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(b * t * n);
    for beta in 0..b {
        for nu in 0..n {
            for tau in 0..t {
                rows.push((beta * t + tau) * n + nu);
            }
        }
    }
    rows
}

fn expand_rows(rows: &[usize], d: usize) -> Vec<usize> {
    rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_leading(x: &Tensor, b: usize, t: usize, forward: bool) -> Result<Tensor> {
    let &[lead, mid, d] = x.shape() else {
        return Err(shape_err(format!("expected a 3-D tensor, got {:?}", x.shape())));
    };
    let ok = b > 0 && t > 0 && if forward { lead == b * t } else { mid == t && lead % b == 0 };
    if !ok {
        return Err(shape_err(format!("shape {:?} does not match b={b}, t={t}", x.shape())));
    }
    let n = if forward { mid } else { lead / b };
    let rows = temporal_rows(b, t, n);
    let rows = if forward { rows } else { inverse(&rows) };
    let data = expand_rows(&rows, d).iter().map(|&i| x.data()[i]).collect();
    let shape = if forward { [b * n, t, d] } else { [b * t, n, d] };
    Tensor::new(&shape, data)
}

/// `[(b·t), n, d] → [(b·n), t, d]`.
pub fn to_temporal(x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    permute_leading(x, b, t, true)
}

/// `[(b·n), t, d] → [(b·t), n, d]`.
pub fn from_temporal(x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    permute_leading(x, b, t, false)
}

/// Temporal self-attention weights; the output projection starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TempAttnParams {
    pub norm: Norm,
    pub attn: AttentionParams,
}

impl TempAttnParams {
    pub fn build(b: &mut LayoutBuilder, block: usize, width: usize, heads: usize) -> Self {
        let p = format!("blocks.{block}.temporal");
        Self {
            norm: Norm::build(b, &format!("{p}.norm"), width),
            attn: AttentionParams::build(b, &format!("{p}.attn"), width, heads, Init::Zeros),
        }
    }

    /// Scalar parameters of one layer at `width`.
    pub fn numel(width: usize) -> usize {
        2 * width + 4 * (width * width + width)
    }
}

/// `x + TempSelfAttn(LN(x))` on `[(b·n)·t, d]` rows.
pub fn temp_self_attn_on<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &TempAttnParams,
    x: Var,
    sequences: usize,
    t: usize,
    mask: &AttnMask,
) -> Result<Var> {
    let h = p.norm.forward(g, store, x)?;
    let a = p.attn.forward(g, store, h, h, sequences, t, t, mask)?;
    g.add(x, a)
}

/// The temporal sub-layer of a block on `(b t) n`-ordered rows: rearrange
/// to `(b n) t`, apply [`temp_self_attn_on`], rearrange back.
#[allow(clippy::too_many_arguments)]
pub fn temporal_residual<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &TempAttnParams,
    x: Var,
    b: usize,
    t: usize,
    n: usize,
    mask: &AttnMask,
) -> Result<Var> {
    let d = g.value(x).cols();
    let rows = temporal_rows(b, t, n);
    let xt = g.gather(x, expand_rows(&rows, d), &[b * n * t, d])?;
    let yt = temp_self_attn_on(g, store, p, xt, b * n, t, mask)?;
    g.gather(yt, expand_rows(&inverse(&rows), d), &[b * t * n, d])
}

/// Eager [`temp_self_attn_on`] for `x: [(b·n), t, d]` and a `{0,1}` mask.
pub fn temp_self_attn<F: Scalar>(
    x: &Tensor<F>,
    store: &ParamStore<F>,
    p: &TempAttnParams,
    mask: &Tensor<F>,
) -> Result<Tensor<F>> {
    let &[seqs, t, d] = x.shape() else {
        return Err(shape_err(format!("expected [(b·n), t, d], got {:?}", x.shape())));
    };
    if mask.shape() != [t, t] {
        return Err(shape_err(format!("mask {:?} for {t} frames", mask.shape())));
    }
    let mask = mask_from_tensor(mask)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(&[seqs * t, d])?);
    let y = temp_self_attn_on(&mut g, store, p, xv, seqs, t, &mask)?;
    g.value(y).clone().reshape(&[seqs, t, d])
}

/// Builds a video model from an image model: every shared tensor is kept
/// verbatim and each block gains a temporal self-attention layer whose
/// output projection is zero.
pub fn inflate_t2i<F: Scalar>(t2i: GenTron<F>, rng: &mut Rng) -> Result<GenTron<F>> {
    t2i.inflate(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rearrange_index_map() {
        // b=1, t=2, n=2, d=1, frame-major [a, b, c, d].
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = to_temporal(&x, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn rearrange_trivial_and_roundtrip() {
        let x = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(to_temporal(&x, 1, 1).unwrap().data(), x.data());

        let mut rng = Rng::new(3);
        let x: Tensor = rng.randn(&[2 * 3, 5, 4]);
        let y = to_temporal(&x, 2, 3).unwrap();
        assert_eq!(y.shape(), &[10, 3, 4]);
        assert!(from_temporal(&y, 2, 3).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn rearrange_extent_mismatch() {
        let x = Tensor::<f32>::zeros(&[5, 2, 1]);
        assert!(to_temporal(&x, 2, 3).is_err());
    }

    #[test]
    fn motion_free_mask_is_identity() {
        assert_eq!(motion_free_mask(1).data(), &[1.0]);
        assert_eq!(motion_free_mask(3), Tensor::eye(3));
        for t in 1..10 {
            let m = motion_free_mask(t);
            let trace: f32 = (0..t).map(|i| m.data()[i * t + i]).sum();
            let total: f32 = m.data().iter().sum();
            assert_eq!(trace, t as f32);
            assert_eq!(total - trace, 0.0);
        }
    }

    #[test]
    fn pseudo_video_repeats_image() {
        let mut rng = Rng::new(8);
        let img: Tensor = rng.randn(&[4, 4, 2]);
        let one = pseudo_video(&img, 1).unwrap();
        assert_eq!(one.frame(0, 0).unwrap(), img);
        let v = pseudo_video(&img, 8).unwrap();
        assert_eq!(v.frames.shape(), &[8, 4, 4, 2]);
        assert!(v.is_motion_free);
        for f in 0..8 {
            assert_eq!(v.frame(0, f).unwrap().max_abs_diff(&img), 0.0);
        }
    }
}
