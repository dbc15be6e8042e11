//! The GenTron diffusion transformer.

pub mod block;
pub mod config;
pub mod embed;
pub mod layers;
pub mod params;

use crate::conditioning::{encoder_for_block, ConditionSet, TextCondition, ToyEncoder};
use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::mask_from_tensor;
use crate::numerics::{AttnMask, Graph, Rng, Scalar, Tensor, Var, LN_EPS};
use crate::video::TempAttnParams;

pub use block::{block_adaln, block_cross_attention, block_forward, BlockParams, Context, TemporalLayout};
pub use config::{default_heads, GenTronConfig, Variant};
pub use embed::{patchify, pos_embed_2d, timestep_features, unpatchify};
pub use layers::{modulate, AttentionParams, Linear, Mlp, Norm};
pub use params::{Init, LayoutBuilder, ParamId, ParamSpec, ParamStore};

/// Per-encoder text pathway: the encoder itself, the pooled projection
/// into the conditioning vector and, for cross-attention, the token projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBranch {
    pub encoder: ToyEncoder,
    pub pooled_proj: Linear,
    pub ctx_proj: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub x_embed: Linear,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub text: Vec<TextBranch>,
    pub blocks: Vec<BlockParams>,
    pub final_modulation: Linear,
    pub decoder: Linear,
}

impl Layout {
    pub fn build(cfg: &GenTronConfig, inflated: bool) -> (Self, Vec<ParamSpec>) {
        let mut b = LayoutBuilder::new();
        let w = cfg.width;
        let cross = cfg.variant == Variant::CrossAttention;
        let x_embed = Linear::build(&mut b, "x_embed", cfg.patch_dim(), w, Init::Xavier);
        let t_fc1 = Linear::build(&mut b, "t_embed.fc1", cfg.time_freq_dim, w, Init::Normal(0.02));
        let t_fc2 = Linear::build(&mut b, "t_embed.fc2", w, w, Init::Normal(0.02));
        let text = cfg
            .text
            .encoders
            .iter()
            .enumerate()
            .map(|(e, ec)| {
                let encoder = ToyEncoder::build(&mut b, e, ec);
                let pooled_proj =
                    Linear::build(&mut b, &format!("text.{e}.pooled_proj"), ec.d_text, w, Init::Xavier);
                let ctx_proj = cross
                    .then(|| Linear::build(&mut b, &format!("text.{e}.ctx_proj"), ec.d_text, w, Init::Xavier));
                TextBranch { encoder, pooled_proj, ctx_proj }
            })
            .collect();
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::build(&mut b, i, w, cfg.mlp_width, cfg.heads, cross))
            .collect();
        let final_modulation = Linear::build(&mut b, "final.modulation", w, 2 * w, Init::Zeros);
        let decoder = Linear::build(&mut b, "final.decoder", w, cfg.patch_dim(), Init::Zeros);
        let mut layout = Self { x_embed, t_fc1, t_fc2, text, blocks, final_modulation, decoder };
        if inflated {
            layout.add_temporal(&mut b, cfg);
        }
        (layout, b.finish())
    }

    fn add_temporal(&mut self, b: &mut LayoutBuilder, cfg: &GenTronConfig) {
        for blk in &mut self.blocks {
            blk.temporal = Some(TempAttnParams::build(b, blk.index, cfg.width, cfg.heads));
        }
    }
}

/// Exact scalar parameter count of the image model; computed from shapes
/// alone, nothing is allocated.
pub fn count_parameters(cfg: &GenTronConfig) -> usize {
    Layout::build(cfg, false).1.iter().map(ParamSpec::numel).sum()
}

/// Parameter count after inflation to a video model.
pub fn count_parameters_inflated(cfg: &GenTronConfig) -> usize {
    Layout::build(cfg, true).1.iter().map(ParamSpec::numel).sum()
}

/// How the leading axis of the input is organised.
#[derive(Clone, Debug, PartialEq)]
pub enum Frames {
    /// Independent images.
    Image,
    /// Clips of `frames` frames; `mask` is the `[frames, frames]` temporal
    /// attention mask shared by every clip.
    Video { frames: usize, mask: AttnMask },
}

impl Frames {
    /// Video layout from a `{0,1}` `[t, t]` mask tensor.
    pub fn video<F: Scalar>(mask: &Tensor<F>) -> Result<Self> {
        let t = mask.shape()[0];
        if mask.shape() != [t, t] {
            return Err(shape_err(format!("temporal mask must be square, got {:?}", mask.shape())));
        }
        Ok(Self::Video { frames: t, mask: mask_from_tensor(mask)? })
    }

    pub fn full_motion(t: usize) -> Self {
        Self::Video { frames: t, mask: AttnMask::None }
    }

    pub fn motion_free(t: usize) -> Self {
        Self::video(&crate::video::motion_free_mask(t)).expect("identity mask")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenTron<F: Scalar = f32> {
    config: GenTronConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    store: ParamStore<F>,
    inflated: bool,
}

impl<F: Scalar> GenTron<F> {
    pub fn new(config: GenTronConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config, false);
        let store = ParamStore::initialize(&specs, rng);
        Ok(Self { config, layout, specs, store, inflated: false })
    }

    /// Rebuilds a model from named tensors that must match the layout for
    /// `config` (inflated or not) exactly.
    pub fn from_tensors(config: GenTronConfig, inflated: bool, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config, inflated);
        let store = ParamStore::from_named(&specs, tensors)?;
        Ok(Self { config, layout, specs, store, inflated })
    }

    pub fn config(&self) -> &GenTronConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn is_inflated(&self) -> bool {
        self.inflated
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> GenTron<G> {
        GenTron {
            config: self.config.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            store: self.store.cast(),
            inflated: self.inflated,
        }
    }

    /// Adds a temporal self-attention layer to every block. Existing
    /// tensors are untouched; new ones are drawn from `rng` except the
    /// zero output projections.
    pub fn inflate(mut self, rng: &mut Rng) -> Result<Self> {
        if self.inflated {
            return Err(Error::AlreadyInflated);
        }
        let mut b = LayoutBuilder::resume(std::mem::take(&mut self.specs));
        self.layout.add_temporal(&mut b, &self.config);
        self.specs = b.finish();
        self.store.extend(&self.specs, rng);
        self.inflated = true;
        Ok(self)
    }

    /// One condition per configured encoder.
    pub fn encode(&self, prompt: &str) -> ConditionSet {
        self.layout.text.iter().map(|t| t.encoder.encode(&self.store, prompt)).collect()
    }

    pub fn null_condition(&self) -> ConditionSet {
        self.layout.text.iter().map(|t| t.encoder.null_condition(&self.store)).collect()
    }

    /// Time MLP output for a single step, `[width]`.
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let v = self.time_embed_on(&mut g, &[t])?;
        g.value(v).clone().reshape(&[self.config.width])
    }

    fn time_embed_on(&self, g: &mut Graph<F>, ts: &[usize]) -> Result<Var> {
        let dim = self.config.time_freq_dim;
        let feats: Vec<f64> = ts.iter().flat_map(|&t| timestep_features(t, dim)).collect();
        let f = g.constant(Tensor::from_f64(&[ts.len(), dim], &feats)?);
        let h = self.layout.t_fc1.forward(g, &self.store, f)?;
        let h = g.silu(h);
        self.layout.t_fc2.forward(g, &self.store, h)
    }

    fn check_conditions(&self, conds: &[ConditionSet]) -> Result<()> {
        let n_enc = self.layout.text.len();
        for (b, set) in conds.iter().enumerate() {
            if set.len() != n_enc {
                return Err(Error::MissingCondition(format!(
                    "item {b}: {} encoder(s) configured, {} condition(s) given",
                    n_enc,
                    set.len()
                )));
            }
            for (e, c) in set.iter().enumerate() {
                if c.source != e {
                    return Err(Error::MissingCondition(format!(
                        "item {b}: slot {e} holds a condition from encoder {}",
                        c.source
                    )));
                }
            }
        }
        Ok(())
    }

    /// ε̂ on the tape. `x` is `[N, H, W, C]`; with [`Frames::Video`], `N` is
    /// clips × frames in `(clip, frame)` order. `ts` and `conds` hold one
    /// entry per image or clip.
    pub fn forward_on(
        &self,
        g: &mut Graph<F>,
        x: Var,
        ts: &[usize],
        conds: &[ConditionSet],
        frames: &Frames,
    ) -> Result<Var> {
        let cfg = &self.config;
        let w = cfg.width;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != cfg.latent_shape {
            return Err(shape_err(format!(
                "input {shape:?} does not match latent shape {:?}",
                cfg.latent_shape
            )));
        }
        let total = shape[0];
        let (frames_per, mask) = match frames {
            Frames::Image => (1, AttnMask::None),
            Frames::Video { frames, mask } => {
                if !self.inflated {
                    return Err(Error::NotInflated);
                }
                if *frames == 0 || !total.is_multiple_of(*frames) {
                    return Err(shape_err(format!("{total} frames do not split into clips of {frames}")));
                }
                (*frames, mask.clone())
            }
        };
        let clips = total / frames_per;
        if ts.len() != clips || conds.len() != clips {
            return Err(shape_err(format!(
                "{clips} item(s) but {} timestep(s) and {} condition set(s)",
                ts.len(),
                conds.len()
            )));
        }
        self.check_conditions(conds)?;
        let n = cfg.num_patches();

        let tokens = embed::patchify_on(g, x, cfg.patch)?;
        let h = self.layout.x_embed.forward(g, &self.store, tokens)?;
        let (gh, gw) = cfg.grid();
        let pos = g.constant(Tensor::from_f64(&[1, n * w], &pos_embed_2d(w, gh, gw))?);
        let h = g.reshape(h, &[total, n * w])?;
        let h = g.add_bcast(h, pos)?;
        let mut h = g.reshape(h, &[total * n, w])?;

        let mut cond = self.time_embed_on(g, ts)?;
        let mut contexts = Vec::with_capacity(self.layout.text.len());
        for (e, branch) in self.layout.text.iter().enumerate() {
            let mut pooled = Vec::with_capacity(clips);
            let mut toks = Vec::with_capacity(clips);
            for set in conds {
                let (tk, pl) = branch.encoder.embed_on(g, &self.store, &set[e])?;
                pooled.push(pl);
                toks.push(tk);
            }
            let pooled = g.concat(&pooled)?;
            let p = branch.pooled_proj.forward(g, &self.store, pooled)?;
            cond = g.add(cond, p)?;
            if let Some(proj) = &branch.ctx_proj {
                contexts.push(Some(self.context_on(g, proj, toks, frames_per)?));
            } else {
                contexts.push(None);
            }
        }
        let cond = layers::repeat_rows(g, cond, frames_per)?;

        let temporal = self.inflated.then_some(TemporalLayout { clips, frames: frames_per, mask });
        for blk in &self.layout.blocks {
            let ctx = contexts[encoder_for_block(&cfg.text, blk.index)].as_ref();
            h = block_forward(g, &self.store, blk, h, cond, ctx, temporal.as_ref())?;
        }

        let c = g.silu(cond);
        let m = self.layout.final_modulation.forward(g, &self.store, c)?;
        let parts = layers::split_columns(g, m, 2)?;
        let h = g.normalize(h, LN_EPS);
        let h = modulate(g, h, parts[0], parts[1])?;
        let out = self.layout.decoder.forward(g, &self.store, h)?;
        embed::unpatchify_on(g, out, cfg.patch, cfg.latent_shape)
    }

    /// Pads each clip's tokens to the longest, projects them to model width
    /// and repeats them once per frame.
    fn context_on(&self, g: &mut Graph<F>, proj: &Linear, toks: Vec<Var>, frames: usize) -> Result<Context> {
        let lens: Vec<usize> = toks.iter().map(|&t| g.value(t).rows()).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        if max_len == 0 || lens.contains(&0) {
            return Err(Error::EmptyContext);
        }
        let d = g.value(toks[0]).cols();
        let mut parts = Vec::with_capacity(toks.len() * 2);
        for (&t, &l) in toks.iter().zip(&lens) {
            parts.push(t);
            if l < max_len {
                parts.push(g.constant(Tensor::zeros(&[max_len - l, d])));
            }
        }
        let padded = g.concat(&parts)?;
        let mut tokens = proj.forward(g, &self.store, padded)?;
        let mut lengths = lens;
        if frames > 1 {
            let w = g.value(tokens).cols();
            let block = max_len * w;
            let idx: Vec<usize> = (0..toks.len())
                .flat_map(|c| (0..frames).flat_map(move |_| c * block..(c + 1) * block))
                .collect();
            let rows = toks.len() * frames * max_len;
            tokens = g.gather(tokens, idx, &[rows, w])?;
            lengths = lengths.iter().flat_map(|&l| std::iter::repeat_n(l, frames)).collect();
        }
        Ok(Context { tokens, max_len, lengths })
    }

    /// Eager ε̂ for `x: [N, H, W, C]` (or a single `[H, W, C]` latent).
    pub fn predict(&self, x: &Tensor<F>, ts: &[usize], conds: &[ConditionSet], frames: &Frames) -> Result<Tensor<F>> {
        let single = x.rank() == 3;
        let x4 = if single {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        } else {
            x.clone()
        };
        let mut g = Graph::new();
        let xv = g.constant(x4);
        let y = self.forward_on(&mut g, xv, ts, conds, frames)?;
        let out = g.value(y).clone();
        if single {
            out.reshape(x.shape())
        } else {
            Ok(out)
        }
    }
}

/// `gentron_forward` for one latent and one condition set.
pub fn gentron_forward<F: Scalar>(
    model: &GenTron<F>,
    x_t: &Tensor<F>,
    t: usize,
    cond: &[TextCondition],
) -> Result<Tensor<F>> {
    model.predict(x_t, &[t], &[cond.to_vec()], &Frames::Image)
}
