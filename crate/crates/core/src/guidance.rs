//! Guided noise estimates and the ancestral DDPM sampler.

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionSet;
use crate::error::{shape_err, Error, Result};
use crate::model::{Frames, GenTron};
use crate::numerics::{Rng, Scalar, Tensor};
use crate::schedule::{ddpm_step, ScheduleState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Text guidance scale λ_T.
    pub lambda_t: f64,
    /// Motion guidance scale λ_M.
    pub lambda_m: f64,
    pub motion_enabled: bool,
    pub steps: usize,
    /// Clip length when sampling video.
    pub frames: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda_t: 7.5, lambda_m: 1.2, motion_enabled: false, steps: 50, frames: 8 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_t >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Config("guidance scales must be non-negative".into()));
        }
        if self.steps == 0 || self.frames == 0 {
            return Err(Error::Config("steps and frames must be positive".into()));
        }
        Ok(())
    }
}

fn combine<F: Scalar>(terms: &[(&Tensor<F>, f64)]) -> Result<Tensor<F>> {
    let shape = terms[0].0.shape();
    if terms.iter().any(|(t, _)| t.shape() != shape) {
        return Err(shape_err("guidance inputs differ in shape"));
    }
    let data = (0..terms[0].0.numel())
        .map(|i| {
            let mut acc = F::zero();
            for (t, w) in terms {
                acc += F::of(*w) * t.data()[i];
            }
            acc
        })
        .collect();
    Tensor::new(shape, data)
}

/// `ε_∅ + λ(ε_c − ε_∅)`, evaluated as `λ·ε_c + (1−λ)·ε_∅` so that λ = 1
/// and λ = 0 return an input exactly.
pub fn cfg_epsilon<F: Scalar>(eps_cond: &Tensor<F>, eps_uncond: &Tensor<F>, lambda_t: f64) -> Result<Tensor<F>> {
    combine(&[(eps_cond, lambda_t), (eps_uncond, 1.0 - lambda_t)])
}

/// Motion-free guidance:
/// `ε(∅,∅) + λ_T(ε(c_T,c_M) − ε(∅,c_M)) + λ_M(ε(∅,c_M) − ε(∅,∅))`,
/// evaluated as `λ_T·ε(c_T,c_M) + (λ_M−λ_T)·ε(∅,c_M) + (1−λ_M)·ε(∅,∅)`.
pub fn mfg_epsilon<F: Scalar>(
    eps_null_null: &Tensor<F>,
    eps_text_motion: &Tensor<F>,
    eps_null_motion: &Tensor<F>,
    lambda_t: f64,
    lambda_m: f64,
) -> Result<Tensor<F>> {
    combine(&[
        (eps_text_motion, lambda_t),
        (eps_null_motion, lambda_m - lambda_t),
        (eps_null_null, 1.0 - lambda_m),
    ])
}

/// Ancestral sampling from `x_T ~ N(0, I)` with any noise predictor
/// `denoise(x_t, t)`. Draw order: `x_T`, then one `z` per step for `t > 0`.
pub fn ddpm_sample<F, D>(schedule: &ScheduleState, shape: &[usize], rng: &mut Rng, mut denoise: D) -> Result<Tensor<F>>
where
    F: Scalar,
    D: FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
{
    let mut x = rng.randn::<F>(shape);
    for t in (0..schedule.len()).rev() {
        let eps = denoise(&x, t)?;
        let z = if t > 0 { rng.randn(shape) } else { Tensor::zeros(shape) };
        x = ddpm_step(&x, &eps, t, &z, schedule)?;
    }
    Ok(x)
}

fn check_mode<F: Scalar>(model: &GenTron<F>, schedule: &ScheduleState, g: &GuidanceConfig) -> Result<()> {
    g.validate()?;
    if g.steps != schedule.len() {
        return Err(Error::Config(format!(
            "guidance steps {} differ from schedule length {}",
            g.steps,
            schedule.len()
        )));
    }
    if g.motion_enabled && !model.is_inflated() {
        return Err(Error::ModeMismatch("motion guidance requires an inflated video model".into()));
    }
    Ok(())
}

fn latent_shape(model: &GenTron<impl Scalar>, lead: usize) -> Vec<usize> {
    let mut s = vec![lead];
    s.extend_from_slice(&model.config().latent_shape);
    s
}

fn split<F: Scalar>(x: &Tensor<F>, parts: usize) -> Result<Vec<Tensor<F>>> {
    let n = x.shape()[0] / parts;
    (0..parts).map(|i| x.slice_leading(i * n, n)).collect()
}

/// Guided samples for a batch of conditions. Images come back as
/// `[B, H, W, C]`; with motion enabled, clips as `[B·frames, H, W, C]`.
pub fn sample_batch<F: Scalar>(
    model: &GenTron<F>,
    schedule: &ScheduleState,
    conds: &[ConditionSet],
    g: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    check_mode(model, schedule, g)?;
    let b = conds.len();
    if b == 0 {
        return Err(Error::MissingCondition("no conditions to sample".into()));
    }
    let null = model.null_condition();
    let mut both: Vec<ConditionSet> = conds.to_vec();
    both.extend(std::iter::repeat_n(null.clone(), b));
    if !g.motion_enabled {
        let shape = latent_shape(model, b);
        return ddpm_sample(schedule, &shape, rng, |x, t| {
            let x2 = Tensor::concat_leading(&[x, x])?;
            let eps = model.predict(&x2, &vec![t; 2 * b], &both, &Frames::Image)?;
            let halves = split(&eps, 2)?;
            cfg_epsilon(&halves[0], &halves[1], g.lambda_t)
        });
    }
    let f = g.frames;
    let shape = latent_shape(model, b * f);
    let nulls = vec![null; b];
    let full = Frames::full_motion(f);
    let still = Frames::motion_free(f);
    ddpm_sample(schedule, &shape, rng, |x, t| {
        let x2 = Tensor::concat_leading(&[x, x])?;
        let eps = model.predict(&x2, &vec![t; 2 * b], &both, &full)?;
        let halves = split(&eps, 2)?;
        let nn = model.predict(x, &vec![t; b], &nulls, &still)?;
        mfg_epsilon(&nn, &halves[0], &halves[1], g.lambda_t, g.lambda_m)
    })
}

/// One guided sample: an image `[H, W, C]` or a clip `[frames, H, W, C]`.
pub fn sample<F: Scalar>(
    model: &GenTron<F>,
    schedule: &ScheduleState,
    cond: &ConditionSet,
    g: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let x = sample_batch(model, schedule, std::slice::from_ref(cond), g, rng)?;
    if g.motion_enabled {
        Ok(x)
    } else {
        let shape = x.shape()[1..].to_vec();
        x.reshape(&shape)
    }
}

/// Conditional sampling without guidance, one forward per step.
pub fn sample_unguided<F: Scalar>(
    model: &GenTron<F>,
    schedule: &ScheduleState,
    conds: &[ConditionSet],
    frames: &Frames,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let per = match frames {
        Frames::Image => 1,
        Frames::Video { frames, .. } => *frames,
    };
    let shape = latent_shape(model, conds.len() * per);
    ddpm_sample(schedule, &shape, rng, |x, t| model.predict(x, &vec![t; conds.len()], conds, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn cfg_examples() {
        let (c, u) = (s(2.0), s(1.0));
        assert_eq!(cfg_epsilon(&c, &u, 1.0).unwrap().item(), 2.0);
        assert_eq!(cfg_epsilon(&c, &u, 0.0).unwrap().item(), 1.0);
        assert_eq!(cfg_epsilon(&c, &u, 7.5).unwrap().item(), 8.5);
    }

    #[test]
    fn mfg_examples() {
        let (nn, tm, nm) = (s(1.0), s(5.0), s(3.0));
        let v = mfg_epsilon(&nn, &tm, &nm, 7.5, 1.2).unwrap().item();
        assert!((v - 18.4).abs() < 1e-12, "{v}");
        assert_eq!(mfg_epsilon(&nn, &tm, &nm, 1.0, 1.0).unwrap().item(), 5.0);
        assert_eq!(mfg_epsilon(&nn, &tm, &nm, 0.0, 0.0).unwrap().item(), 1.0);
    }

    #[test]
    fn telescoping_exact_on_random_tensors() {
        let mut rng = Rng::new(4);
        let a: Tensor = rng.randn(&[3, 5]);
        let b: Tensor = rng.randn(&[3, 5]);
        let c: Tensor = rng.randn(&[3, 5]);
        assert!(cfg_epsilon(&a, &b, 1.0).unwrap().bitwise_eq(&a) || cfg_epsilon(&a, &b, 1.0).unwrap() == a);
        assert_eq!(cfg_epsilon(&a, &b, 0.0).unwrap(), b);
        assert_eq!(mfg_epsilon(&a, &b, &c, 1.0, 1.0).unwrap(), b);
        assert_eq!(mfg_epsilon(&a, &b, &c, 0.0, 0.0).unwrap(), a);
    }

    #[test]
    fn linear_in_each_scale() {
        let mut rng = Rng::new(5);
        let nn: Tensor<f64> = rng.randn(&[6]);
        let tm: Tensor<f64> = rng.randn(&[6]);
        let nm: Tensor<f64> = rng.randn(&[6]);
        let h = 1e-3;
        let f = |lt, lm| mfg_epsilon(&nn, &tm, &nm, lt, lm).unwrap();
        let dt = f(2.0 + h, 1.1).zip_with(&f(2.0 - h, 1.1), |a, b| (a - b) / (2.0 * h)).unwrap();
        let dm = f(2.0, 1.1 + h).zip_with(&f(2.0, 1.1 - h), |a, b| (a - b) / (2.0 * h)).unwrap();
        let bt = tm.zip_with(&nm, |a, b| a - b).unwrap();
        let bm = nm.zip_with(&nn, |a, b| a - b).unwrap();
        assert!(dt.max_abs_diff(&bt) < 1e-6);
        assert!(dm.max_abs_diff(&bm) < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(cfg_epsilon(&Tensor::<f32>::zeros(&[2]), &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let sched = crate::schedule::make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let run = |seed| {
            ddpm_sample::<f32, _>(&sched, &[4], &mut Rng::new(seed), |x, _| Ok(x.map(|v| 0.5 * v))).unwrap()
        };
        assert!(run(1).bitwise_eq(&run(1)));
        assert!(!run(1).bitwise_eq(&run(2)));
    }
}
