//! AdamW with bias-corrected moments and decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Scalar, Tensor};
use crate::trainer::TrainConfig;

/// First and second moments, one tensor per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<F: Scalar>(store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// Appends zero moments for parameters added after creation (inflation).
    pub fn extend<F: Scalar>(&mut self, store: &ParamStore<F>) {
        for p in store.iter().skip(self.m.len()) {
            self.m.push(Tensor::zeros(p.tensor.shape()));
            self.v.push(Tensor::zeros(p.tensor.shape()));
        }
    }
}

/// One update from the gradients held in `store`.
pub fn adamw_step<F: Scalar>(store: &mut ParamStore<F>, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            store.len()
        )));
    }
    for p in store.iter() {
        if p.tensor.grad().is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad: Vec<f64> = p.tensor.grad().unwrap().iter().map(|g| g.f64()).collect();
        let data = p.tensor.data_mut();
        for (i, g) in grad.into_iter().enumerate() {
            let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            data[i] = F::of(data[i].f64() * decay - update);
        }
    }
    Ok(())
}
