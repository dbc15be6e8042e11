//! Patch tokens, fixed sinusoidal position features, and timestep features.

use crate::error::{shape_err, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Source offsets that turn a batch of `[H, W, C]` latents into
/// `[B·n, patch²·C]` tokens in raster order over the patch grid; each token
/// is laid out `(py, px, c)`.
pub fn patch_index(batch: usize, shape: [usize; 3], patch: usize) -> Vec<usize> {
    let [h, w, c] = shape;
    let (gh, gw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    for px in 0..patch {
                        let base = ((gy * patch + py) * w + gx * patch + px) * c;
                        idx.extend((0..c).map(|ch| b * h * w * c + base + ch));
                    }
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn split_latent(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [h, w, c] => Ok((1, [h, w, c])),
        [b, h, w, c] => Ok((b, [h, w, c])),
        _ => Err(shape_err(format!("latent must be [H, W, C] or [B, H, W, C], got {shape:?}"))),
    }
}

fn check_divisible(shape: [usize; 3], patch: usize) -> Result<()> {
    if patch == 0 || !shape[0].is_multiple_of(patch) || !shape[1].is_multiple_of(patch) {
        return Err(shape_err(format!("latent {:?} not divisible by patch {patch}", shape)));
    }
    Ok(())
}

/// Flattened non-overlapping patches, before any embedding.
pub fn patchify<F: Scalar>(latent: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let (b, shape) = split_latent(latent.shape())?;
    check_divisible(shape, patch)?;
    let n = (shape[0] / patch) * (shape[1] / patch);
    let data = patch_index(b, shape, patch).iter().map(|&i| latent.data()[i]).collect();
    Tensor::new(&[b * n, patch * patch * shape[2]], data)
}

/// Inverse of [`patchify`]; `shape` is the per-item `[H, W, C]`.
pub fn unpatchify<F: Scalar>(tokens: &Tensor<F>, patch: usize, shape: [usize; 3]) -> Result<Tensor<F>> {
    check_divisible(shape, patch)?;
    let per: usize = shape.iter().product();
    if !tokens.numel().is_multiple_of(per) || tokens.cols() != patch * patch * shape[2] {
        return Err(shape_err(format!("tokens {:?} do not tile latent {shape:?}", tokens.shape())));
    }
    let b = tokens.numel() / per;
    let inv = inverse(&patch_index(b, shape, patch));
    let data = inv.iter().map(|&i| tokens.data()[i]).collect();
    Tensor::new(&[b, shape[0], shape[1], shape[2]], data)
}

pub fn patchify_on<F: Scalar>(g: &mut Graph<F>, x: Var, patch: usize) -> Result<Var> {
    let (b, shape) = split_latent(g.shape(x))?;
    check_divisible(shape, patch)?;
    let n = (shape[0] / patch) * (shape[1] / patch);
    g.gather(x, patch_index(b, shape, patch), &[b * n, patch * patch * shape[2]])
}

pub fn unpatchify_on<F: Scalar>(g: &mut Graph<F>, tokens: Var, patch: usize, shape: [usize; 3]) -> Result<Var> {
    let per: usize = shape.iter().product();
    let b = g.value(tokens).numel() / per;
    let inv = inverse(&patch_index(b, shape, patch));
    g.gather(tokens, inv, &[b, shape[0], shape[1], shape[2]])
}

fn sincos_1d(dim: usize, pos: f64, out: &mut Vec<f64>) {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64)).collect();
    out.extend(freqs.iter().map(|f| (pos * f).sin()));
    out.extend(freqs.iter().map(|f| (pos * f).cos()));
}

/// Fixed 2-D sinusoidal position features `[gh·gw, width]`, base 10000:
/// the first half of each row encodes the grid row, the second half the column.
pub fn pos_embed_2d(width: usize, gh: usize, gw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(gh * gw * width);
    for y in 0..gh {
        for x in 0..gw {
            sincos_1d(width / 2, y as f64, &mut out);
            sincos_1d(width / 2, x as f64, &mut out);
        }
    }
    out
}

/// `[sin(t·f_0..), cos(t·f_0..)]` with `f_i = 10000^(−i/half)`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_for_reference_latent() {
        let x = Tensor::<f32>::zeros(&[32, 32, 4]);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[256, 16]);
    }

    #[test]
    fn single_patch_is_flattened_latent() {
        let x = Tensor::<f32>::new(&[2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 12]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn roundtrip_batch() {
        let x = Tensor::<f32>::new(&[3, 4, 6, 2], (0..144).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[3 * 6, 8]);
        assert_eq!(unpatchify(&p, 2, [4, 6, 2]).unwrap(), x);
    }

    #[test]
    fn indivisible_errors() {
        assert!(patchify(&Tensor::<f32>::zeros(&[3, 4, 1]), 2).is_err());
    }

    #[test]
    fn timestep_zero_is_sin_zero_cos_one() {
        let f = timestep_features(0, 8);
        assert_eq!(f, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn timestep_features_are_distinct() {
        let all: Vec<Vec<f64>> = (0..1000).map(|t| timestep_features(t, 64)).collect();
        for t in 1..1000 {
            let d: f64 = all[t].iter().zip(&all[t - 1]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6);
        }
    }

    #[test]
    fn pos_embed_layout() {
        let p = pos_embed_2d(8, 2, 3);
        assert_eq!(p.len(), 6 * 8);
        // token (0, 0): sin block zero, cos block one in both halves.
        assert_eq!(&p[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
