//! Transformer blocks for both conditioning variants.

use crate::error::{Error, Result};
use crate::model::layers::{modulate, split_columns, AttentionParams, Linear, Mlp, Norm};
use crate::model::params::{Init, LayoutBuilder, ParamStore};
use crate::numerics::{AttnMask, Graph, Scalar, Var, LN_EPS};
use crate::video::{self, TempAttnParams};

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams {
    pub norm: Norm,
    pub attn: AttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub index: usize,
    /// `SiLU(cond) → [shift₁, scale₁, gate₁, shift₂, scale₂, gate₂]`, zero-initialized.
    pub modulation: Linear,
    pub attn: AttentionParams,
    pub cross: Option<CrossAttnParams>,
    pub temporal: Option<TempAttnParams>,
    pub mlp: Mlp,
}

impl BlockParams {
    pub fn build(
        b: &mut LayoutBuilder,
        index: usize,
        width: usize,
        mlp_width: usize,
        heads: usize,
        cross: bool,
    ) -> Self {
        let p = format!("blocks.{index}");
        Self {
            index,
            modulation: Linear::build(b, &format!("{p}.modulation"), width, 6 * width, Init::Zeros),
            attn: AttentionParams::build(b, &format!("{p}.attn"), width, heads, Init::Xavier),
            cross: cross.then(|| CrossAttnParams {
                norm: Norm::build(b, &format!("{p}.cross_norm"), width),
                attn: AttentionParams::build(b, &format!("{p}.cross"), width, heads, Init::Zeros),
            }),
            temporal: None,
            mlp: Mlp::build(b, &format!("{p}.mlp"), width, mlp_width),
        }
    }
}

/// Text tokens for cross-attention, already projected to model width:
/// `[groups·max_len, width]` with the first `lengths[g]` rows of each group valid.
#[derive(Clone, Debug)]
pub struct Context {
    pub tokens: Var,
    pub max_len: usize,
    pub lengths: Vec<usize>,
}

/// Frame structure for the temporal layer: `x` rows are `(clip, frame, patch)`.
#[derive(Clone, Debug)]
pub struct TemporalLayout {
    pub clips: usize,
    pub frames: usize,
    pub mask: AttnMask,
}

/// One block. `x` is `[G·n, width]` and `cond` is `[G, width]`, one row per
/// image (or frame). Sub-layers, each residual:
/// adaLN-modulated self-attention, cross-attention (if present),
/// temporal self-attention (if present and a layout is given), adaLN-modulated MLP.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &BlockParams,
    x: Var,
    cond: Var,
    ctx: Option<&Context>,
    temporal: Option<&TemporalLayout>,
) -> Result<Var> {
    let groups = g.value(cond).rows();
    let n = g.value(x).rows() / groups;
    let c = g.silu(cond);
    let m = p.modulation.forward(g, store, c)?;
    let parts = split_columns(g, m, 6)?;
    let [shift1, scale1, gate1, shift2, scale2, gate2] = parts[..] else { unreachable!() };

    let h = g.normalize(x, LN_EPS);
    let h = modulate(g, h, shift1, scale1)?;
    let a = p.attn.forward(g, store, h, h, groups, n, n, &AttnMask::None)?;
    let a = g.mul_bcast(a, gate1)?;
    let mut x = g.add(x, a)?;

    if let Some(cross) = &p.cross {
        let ctx = ctx.ok_or(Error::EmptyContext)?;
        let h = cross.norm.forward(g, store, x)?;
        let mask = AttnMask::KeyLengths(ctx.lengths.clone());
        let a = cross.attn.forward(g, store, h, ctx.tokens, groups, n, ctx.max_len, &mask)?;
        x = g.add(x, a)?;
    }

    if let (Some(tp), Some(layout)) = (&p.temporal, temporal) {
        x = video::temporal_residual(g, store, tp, x, layout.clips, layout.frames, n, &layout.mask)?;
    }

    let h = g.normalize(x, LN_EPS);
    let h = modulate(g, h, shift2, scale2)?;
    let h = p.mlp.forward(g, store, h)?;
    let h = g.mul_bcast(h, gate2)?;
    g.add(x, h)
}

/// adaLN-Zero block: `cond` is the time embedding plus pooled text.
pub fn block_adaln<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &BlockParams,
    x: Var,
    cond: Var,
) -> Result<Var> {
    block_forward(g, store, p, x, cond, None, None)
}

/// Cross-attention block: queries from the image tokens, keys and values
/// from `ctx`; `t_cond` drives the adaLN modulation.
pub fn block_cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &BlockParams,
    x: Var,
    ctx: &Context,
    t_cond: Var,
) -> Result<Var> {
    if p.cross.is_none() {
        return Err(Error::ModeMismatch("block has no cross-attention weights".into()));
    }
    block_forward(g, store, p, x, t_cond, Some(ctx), None)
}
