//! Diffusion training for images and joint image/video fine-tuning.

use crate::conditioning::{drop_condition, ConditionSet};
use crate::error::{shape_err, Error, Result};
use crate::model::{Frames, GenTron};
use crate::numerics::{Graph, Rng, Scalar, Tensor};
use crate::schedule::{q_sample_batch, ScheduleState};
use crate::trainer::{adamw_step, AdamState, TrainConfig};
use crate::video::pseudo_video;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    /// `[H, W, C]`.
    pub latent: Tensor,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTextPair {
    /// `[frames, H, W, C]`.
    pub frames: Tensor,
    pub prompt: String,
}

/// Which data a fine-tuning step used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Pseudo-videos from images, identity temporal mask.
    MotionFree,
    /// Real clips, full temporal mask.
    Video,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub branches: Vec<Branch>,
    pub optimizer: AdamState,
}

/// One Bernoulli draw: motion-free with probability `p_motion_free`.
pub fn draw_branch(rng: &mut Rng, p_motion_free: f64) -> Branch {
    if rng.bernoulli(p_motion_free) {
        Branch::MotionFree
    } else {
        Branch::Video
    }
}

/// Diffusion loss `mean((ε̂(x_t) − ε)²)`; leaves `∂loss/∂θ` in the store's
/// grad slots (zeroed first) and returns the loss.
pub fn compute_gradients<F: Scalar>(
    model: &mut GenTron<F>,
    x_t: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    conds: &[ConditionSet],
    frames: &Frames,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let target = g.constant(eps.clone());
    let out = model.forward_on(&mut g, x, ts, conds, frames)?;
    let loss = g.mse(out, target)?;
    let grads = g.backward(loss)?;
    let store = model.store_mut();
    store.zero_grads();
    grads.write_params(store);
    Ok(g.value(loss).item().f64())
}

/// Cycles through a shuffled order, reshuffling at each epoch boundary.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct StepBatch {
    x0: Tensor,
    prompts: Vec<String>,
}

fn diffusion_step(
    model: &mut GenTron,
    opt: &mut AdamState,
    batch: StepBatch,
    frames: &Frames,
    schedule: &ScheduleState,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let null = model.null_condition();
    let mut ts = Vec::with_capacity(batch.prompts.len());
    let mut conds = Vec::with_capacity(batch.prompts.len());
    for prompt in &batch.prompts {
        ts.push(rng.below(schedule.len()));
        conds.push(drop_condition(&model.encode(prompt), &null, cfg.p_text_drop, rng));
    }
    let eps = rng.randn(batch.x0.shape());
    let x_t = q_sample_batch(&batch.x0, &ts, &eps, schedule)?;
    let loss = compute_gradients(model, &x_t, &ts, &eps, &conds, frames)?;
    adamw_step(model.store_mut(), opt, cfg)?;
    Ok(loss)
}

fn check_latent(model: &GenTron, t: &Tensor, lead: Option<usize>) -> Result<()> {
    let want = model.config().latent_shape;
    let ok = match lead {
        None => t.shape() == want,
        Some(f) => t.rank() == 4 && t.shape()[0] == f && t.shape()[1..] == want,
    };
    if ok {
        Ok(())
    } else {
        Err(shape_err(format!("sample shape {:?} does not match latent {:?}", t.shape(), want)))
    }
}

/// Text-to-image training. Per step and item: uniform `t`, text dropout,
/// Gaussian noise; then one AdamW update on the batch-mean loss.
pub fn train_t2i(
    model: &mut GenTron,
    dataset: &[ImageTextPair],
    schedule: &ScheduleState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no image-text pairs".into()));
    }
    for d in dataset {
        check_latent(model, &d.latent, None)?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamState::new(model.store());
    let mut sampler = Sampler::new(dataset.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let items: Vec<&ImageTextPair> = (0..cfg.batch).map(|_| &dataset[sampler.next(&mut rng)]).collect();
        let latents: Vec<&Tensor> = items.iter().map(|p| &p.latent).collect();
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&model.config().latent_shape);
        let x0 = Tensor::concat_leading(&latents)?.reshape(&shape)?;
        let prompts = items.iter().map(|p| p.prompt.clone()).collect();
        losses.push(diffusion_step(model, &mut opt, StepBatch { x0, prompts }, &Frames::Image, schedule, cfg, &mut rng)?);
    }
    Ok(TrainOutcome { losses, branches: Vec::new(), optimizer: opt })
}

/// Joint image/video fine-tuning of an inflated model. Each step draws its
/// branch once; noise is independent per frame.
pub fn finetune_t2v(
    model: &mut GenTron,
    image_ds: &[ImageTextPair],
    video_ds: &[VideoTextPair],
    schedule: &ScheduleState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !model.is_inflated() {
        return Err(Error::NotInflated);
    }
    let t = cfg.t_frames;
    for d in image_ds {
        check_latent(model, &d.latent, None)?;
    }
    for d in video_ds {
        check_latent(model, &d.frames, Some(t))?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamState::new(model.store());
    let mut images = Sampler::new(image_ds.len());
    let mut videos = Sampler::new(video_ds.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut branches = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let branch = draw_branch(&mut rng, cfg.p_motion_free);
        let (clips, prompts, frames) = match branch {
            Branch::MotionFree => {
                if image_ds.is_empty() {
                    return Err(Error::EmptyDataset("motion-free step needs image-text pairs".into()));
                }
                let mut clips = Vec::with_capacity(cfg.batch);
                let mut prompts = Vec::with_capacity(cfg.batch);
                for _ in 0..cfg.batch {
                    let p = &image_ds[images.next(&mut rng)];
                    clips.push(pseudo_video(&p.latent, t)?.frames);
                    prompts.push(p.prompt.clone());
                }
                (clips, prompts, Frames::motion_free(t))
            }
            Branch::Video => {
                if video_ds.is_empty() {
                    return Err(Error::EmptyDataset("video step needs video-text pairs".into()));
                }
                let mut clips = Vec::with_capacity(cfg.batch);
                let mut prompts = Vec::with_capacity(cfg.batch);
                for _ in 0..cfg.batch {
                    let v = &video_ds[videos.next(&mut rng)];
                    clips.push(v.frames.clone());
                    prompts.push(v.prompt.clone());
                }
                (clips, prompts, Frames::full_motion(t))
            }
        };
        let refs: Vec<&Tensor> = clips.iter().collect();
        let x0 = Tensor::concat_leading(&refs)?;
        losses.push(diffusion_step(model, &mut opt, StepBatch { x0, prompts }, &frames, schedule, cfg, &mut rng)?);
        branches.push(branch);
    }
    Ok(TrainOutcome { losses, branches, optimizer: opt })
}
