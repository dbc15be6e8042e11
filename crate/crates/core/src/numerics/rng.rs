//! Seeded random source.
//!
//! The generator is ChaCha8 (counter based, platform independent) seeded via
//! `seed_from_u64`. Uniforms take the top 53 bits of a `u64` draw; normals
//! use the Box–Muller transform, returning the cosine branch first and
//! caching the sine branch for the next call.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics on `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Always consumes one draw, so the stream does not depend on `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn randn<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(self.normal())).collect();
        Tensor::new(shape, data).expect("invalid shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Standard normal tensor drawn from `rng`.
pub fn randn<F: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<F> {
    rng.randn(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor = Rng::new(7).randn(&[4, 5]);
        let b: Tensor = Rng::new(7).randn(&[4, 5]);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor = Rng::new(1).randn(&[16]);
        let b: Tensor = Rng::new(2).randn(&[16]);
        assert!(!a.bitwise_eq(&b));
    }

    #[test]
    fn normal_moments() {
        let t: Tensor<f64> = Rng::new(42).randn(&[100_000]);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_bounds_and_below() {
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(rng.below(7) < 7);
        }
    }

    #[test]
    fn bernoulli_extremes() {
        let mut rng = Rng::new(5);
        assert!((0..1000).all(|_| !rng.bernoulli(0.0)));
        assert!((0..1000).all(|_| rng.bernoulli(1.0)));
    }
}
