//! The optimal noise predictor for Gaussian data, used to test the
//! schedule and sampler end to end.
//!
//! With `x0 ~ N(μ, s²)` per coordinate and `x_t = √ᾱ x0 + √(1−ᾱ) ε`,
//! `E[ε | x_t] = √(1−ᾱ) (x_t − √ᾱ μ) / (1 − ᾱ(1 − s²))`.

use gentron::guidance::ddpm_sample;
use gentron::numerics::{Rng, Tensor};
use gentron::schedule::ScheduleState;

pub fn optimal_epsilon(x_t: f64, alpha_bar: f64, mu: f64, s: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() * (x_t - alpha_bar.sqrt() * mu) / (1.0 - alpha_bar * (1.0 - s * s))
}

/// `E[ε | x_t]` by direct quadrature over ε on a fine grid.
pub fn quadrature_epsilon(x_t: f64, alpha_bar: f64, mu: f64, s: f64) -> f64 {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let var = (a * s).powi(2);
    let (mut num, mut den) = (0.0, 0.0);
    let n = 40_000;
    for i in 0..=n {
        let e = -12.0 + 24.0 * i as f64 / n as f64;
        let r = x_t - a * mu - b * e;
        let w = (-0.5 * e * e - 0.5 * r * r / var).exp();
        num += e * w;
        den += w;
    }
    num / den
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub target: Vec<f64>,
}

impl OracleResult {
    /// Largest `|mean − μ| / SE` over coordinates.
    pub fn max_z(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.target)
            .zip(&self.std_error)
            .map(|((m, t), se)| (m - t).abs() / se)
            .fold(0.0, f64::max)
    }
}

/// Draws `n` samples with the optimal predictor and reports per-coordinate
/// sample means and standard errors.
pub fn sample_gaussian(schedule: &ScheduleState, mu: &[f64], s: f64, n: usize, seed: u64) -> OracleResult {
    let d = mu.len();
    let mut rng = Rng::new(seed);
    let x: Tensor<f64> = ddpm_sample(schedule, &[n, d], &mut rng, |x, t| {
        let ab = schedule.alpha_bar[t];
        let data = x.data().iter().enumerate().map(|(i, &v)| optimal_epsilon(v, ab, mu[i % d], s)).collect();
        Tensor::new(x.shape(), data)
    })
    .expect("oracle sampling");
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((acc, v), m)| *acc += (v - m).powi(2) / (n - 1) as f64);
    }
    let std_error = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    OracleResult { mean, std_error, target: mu.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_quadrature() {
        for &(x, ab, mu, s) in &[
            (0.3, 0.5, 1.0, 0.5),
            (-1.2, 0.9, -0.4, 1.3),
            (2.0, 0.05, 0.7, 0.2),
            (0.0, 0.999, 0.0, 1.0),
            (1.5, 0.3, 2.0, 0.8),
        ] {
            let (a, b) = (optimal_epsilon(x, ab, mu, s), quadrature_epsilon(x, ab, mu, s));
            assert!((a - b).abs() < 1e-6, "{a} vs {b} at {x} {ab} {mu} {s}");
        }
    }

    #[test]
    fn standard_normal_data_gives_scaled_input() {
        // s = 1: ε* = √(1−ᾱ)(x − √ᾱ μ).
        let v = optimal_epsilon(0.8, 0.36, 0.5, 1.0);
        assert!((v - 0.8 * (0.8 - 0.6 * 0.5)).abs() < 1e-12);
    }
}
