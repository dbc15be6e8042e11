//! Optimization, training loops and checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adamw::{adamw_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use train::{
    compute_gradients, draw_branch, finetune_t2v, train_t2i, Branch, ImageTextPair, TrainOutcome, VideoTextPair,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub p_motion_free: f64,
    pub p_text_drop: f64,
    pub t_frames: usize,
    /// Set from the run's top-level seed rather than the config body.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            batch: 16,
            steps: 1000,
            p_motion_free: 0.1,
            p_text_drop: 0.1,
            t_frames: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_motion_free) || !prob(self.p_text_drop) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.t_frames == 0 {
            return Err(Error::Config("lr, batch and t_frames must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}
