use serde::{Deserialize, Serialize};

use crate::conditioning::{EncoderSpec, ToyEncoderConfig};
use crate::error::{Error, Result};

/// How text reaches the transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pooled text joins the time embedding; blocks see it only via adaLN.
    AdalnZero,
    /// adaLN carries time and pooled text; token embeddings enter through
    /// cross-attention in every block.
    CrossAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenTronConfig {
    pub depth: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub patch: usize,
    /// `(H, W, C)`.
    pub latent_shape: [usize; 3],
    pub heads: usize,
    pub variant: Variant,
    /// Size of the sinusoidal timestep features fed to the time MLP.
    pub time_freq_dim: usize,
    pub text: EncoderSpec,
}

/// One head per 64 channels, at least one.
pub fn default_heads(width: usize) -> usize {
    (width / 64).max(1)
}

impl GenTronConfig {
    fn preset(depth: usize, width: usize, mlp_width: usize) -> Self {
        Self {
            depth,
            width,
            mlp_width,
            patch: 2,
            latent_shape: [32, 32, 4],
            heads: default_heads(width),
            variant: Variant::CrossAttention,
            time_freq_dim: 256,
            text: EncoderSpec::single(8192, 1024, 77),
        }
    }

    /// GenTron-XL/2: depth 28, width 1152, MLP width 4608.
    pub fn xl2() -> Self {
        Self::preset(28, 1152, 4608)
    }

    /// GenTron-G/2: depth 48, width 1664, MLP width 6656.
    pub fn g2() -> Self {
        Self::preset(48, 1664, 6656)
    }

    /// Small configuration for CPU training: 8×8×4 latents, MLP ratio 4.
    pub fn desk(depth: usize, width: usize, variant: Variant) -> Self {
        Self {
            depth,
            width,
            mlp_width: 4 * width,
            patch: 2,
            latent_shape: [8, 8, 4],
            heads: default_heads(width),
            variant,
            time_freq_dim: 64,
            text: EncoderSpec::single(128, 32, 8),
        }
    }

    pub fn with_text(mut self, text: EncoderSpec) -> Self {
        self.text = text;
        self
    }

    /// The same config with both encoders of a dual setup equal to the
    /// single encoder.
    pub fn with_dual_text(self) -> Self {
        let e: ToyEncoderConfig = self.text.encoders[0].clone();
        self.with_text(EncoderSpec::dual(e.clone(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.latent_shape;
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.mlp_width == 0 || self.patch == 0 || c == 0 {
            return bad("depth, width, mlp_width, patch and channels must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("latent {h}×{w} is not divisible by patch {}", self.patch));
        }
        if !self.width.is_multiple_of(4) {
            return bad("width must be a multiple of 4 for 2-D position embeddings".into());
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return bad("time_freq_dim must be even and positive".into());
        }
        self.text.validate()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_shape[0] / self.patch, self.latent_shape[1] / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened pixels per patch, `patch² · C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_shape[2]
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape.iter().product()
    }
}
