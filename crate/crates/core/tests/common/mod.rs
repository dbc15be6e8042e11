#![allow(dead_code)]

use gentron::model::{GenTron, GenTronConfig, Variant};
use gentron::numerics::{Rng, Scalar};

pub fn desk(variant: Variant) -> GenTronConfig {
    GenTronConfig::desk(2, 32, variant)
}

/// Adds `N(0, std²)` noise to every parameter so no branch stays at zero.
pub fn perturb<F: Scalar>(model: &mut GenTron<F>, seed: u64, std: f64) {
    let mut rng = Rng::new(seed);
    for p in model.store_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x += F::of(std * rng.normal());
        }
    }
}

pub fn random_model(variant: Variant, seed: u64) -> GenTron {
    let mut m = GenTron::new(desk(variant), &mut Rng::new(seed)).unwrap();
    perturb(&mut m, seed + 1, 0.05);
    m
}
