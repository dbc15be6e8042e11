//! Linear noise schedule, closed-form forward noising, and the DDPM
//! reverse step with ε-prediction.
//!
//! Steps are indexed `0..T`; `alpha_bar[t]` is the product of
//! `alpha[0..=t]`. Coefficients are kept in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const FULL_STEPS: usize = 1000;
pub const DESK_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` inclusive; `σ_t = √β_t`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<ScheduleState> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Ok(ScheduleState::from_betas(beta))
}

impl ScheduleState {
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self { beta, alpha, alpha_bar, sigma }
    }

    /// The 1000-step default range rescaled by `1000/steps`, so short
    /// chains still end close to pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let k = FULL_STEPS as f64 / steps.max(1) as f64;
        make_linear_schedule(steps, DEFAULT_BETA_START * k, DEFAULT_BETA_END * k)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::OutOfRange { index: t, limit: self.len() });
        }
        Ok(())
    }
}

/// Serializable schedule settings; missing betas mean [`ScheduleState::scaled_linear`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DESK_STEPS, beta_start: None, beta_end: None }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<ScheduleState> {
        match (self.beta_start, self.beta_end) {
            (None, None) => ScheduleState::scaled_linear(self.steps),
            (Some(a), Some(b)) => make_linear_schedule(self.steps, a, b),
            _ => Err(Error::Config("set both beta_start and beta_end or neither".into())),
        }
    }
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps`.
pub fn q_sample<F: Scalar>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, s: &ScheduleState) -> Result<Tensor<F>> {
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    x0.zip_with(eps, |x, e| a * x + b * e)
}

/// [`q_sample`] with one timestep per leading-axis slice of `x0`.
pub fn q_sample_batch<F: Scalar>(
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    s: &ScheduleState,
) -> Result<Tensor<F>> {
    if x0.shape() != eps.shape() {
        return Err(shape_err("q_sample: noise shape differs from data shape"));
    }
    let lead = x0.shape()[0];
    if !lead.is_multiple_of(ts.len().max(1)) || ts.is_empty() {
        return Err(shape_err(format!("{} timesteps for leading extent {lead}", ts.len())));
    }
    let chunk = x0.numel() / ts.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        s.check_t(t)?;
        let ab = s.alpha_bar[t];
        let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let span = i * chunk..(i + 1) * chunk;
        out.extend(x0.data()[span.clone()].iter().zip(&eps.data()[span]).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape(), out)
}

/// One reverse step:
/// `x_{t-1} = (x_t − (1−α_t)/√(1−ᾱ_t) · ε̂) / √α_t + σ_t z`.
/// `z` must be all zeros at `t = 0`.
pub fn ddpm_step<F: Scalar>(
    x_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    z: &Tensor<F>,
    s: &ScheduleState,
) -> Result<Tensor<F>> {
    s.check_t(t)?;
    if x_t.shape() != eps_hat.shape() || x_t.shape() != z.shape() {
        return Err(shape_err("ddpm_step: x_t, eps_hat and z must share a shape"));
    }
    if t == 0 && z.data().iter().any(|&v| v != F::zero()) {
        return Err(Error::FinalStepNoise);
    }
    let inv_sqrt_alpha = F::of(1.0 / s.alpha[t].sqrt());
    let eps_coef = F::of((1.0 - s.alpha[t]) / (1.0 - s.alpha_bar[t]).sqrt());
    let sigma = F::of(s.sigma[t]);
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * n)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Mean squared error over all elements, as a `[1]` tensor.
pub fn eps_loss<F: Scalar>(eps_hat: &Tensor<F>, eps: &Tensor<F>) -> Result<Tensor<F>> {
    let d = eps_hat.zip_with(eps, |a, b| (a - b) * (a - b))?;
    let n = F::of(d.numel() as f64);
    Ok(Tensor::scalar(d.data().iter().copied().sum::<F>() / n))
}
