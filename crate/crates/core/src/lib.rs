//! GenTron: a diffusion transformer for text-to-image generation, with
//! temporal layers for text-to-video fine-tuning.

pub mod conditioning;
pub mod error;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod schedule;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use model::{count_parameters, gentron_forward, Frames, GenTron, GenTronConfig, Variant};
pub use numerics::{Rng, Tensor};
