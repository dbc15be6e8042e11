//! Named parameter storage and the layout builder that allocates it.

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform over the two extents of a weight matrix.
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize<F: Scalar>(&self, rng: &mut Rng) -> Tensor<F> {
        let n = self.numel();
        let data: Vec<F> = match self.init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Xavier => {
                let (fan_in, fan_out) = (self.shape[0], self.shape[self.shape.len() - 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::of(rng.uniform_range(-limit, limit))).collect()
            }
            Init::Normal(std) => (0..n).map(|_| F::of(std * rng.normal())).collect(),
        };
        Tensor::new(&self.shape, data).expect("parameter spec shape")
    }
}

/// Records parameter specs in allocation order; a [`ParamId`] is the
/// position of its spec.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues an existing layout, e.g. when inflating a model.
    pub fn resume(specs: Vec<ParamSpec>) -> Self {
        Self { specs }
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Scalar = f32> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }
}

impl<F: Scalar> ParamStore<F> {
    /// Allocates and initializes every spec in order.
    pub fn initialize(specs: &[ParamSpec], rng: &mut Rng) -> Self {
        let mut store = Self::default();
        for spec in specs {
            let t = spec.materialize(rng);
            store.insert(spec.name.clone(), t);
        }
        store
    }

    /// Builds a store from named tensors, which must match `specs` exactly
    /// in order, names and shapes.
    pub fn from_named(specs: &[ParamSpec], tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(shape_err(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut store = Self::default();
        for (spec, (name, t)) in specs.iter().zip(tensors) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(shape_err(format!(
                    "expected `{}` {:?}, found `{name}` {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            store.insert(name, t);
        }
        Ok(store)
    }

    fn insert(&mut self, name: String, tensor: Tensor<F>) -> ParamId {
        let id = ParamId(self.params.len());
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, tensor });
        id
    }

    /// Appends freshly initialized parameters for specs beyond the current length.
    pub fn extend(&mut self, specs: &[ParamSpec], rng: &mut Rng) {
        for spec in &specs[self.params.len()..] {
            let t = spec.materialize(rng);
            self.insert(spec.name.clone(), t);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of every parameter value.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.bitwise_eq(&b.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_allocation_order() {
        let mut b = LayoutBuilder::new();
        let w = b.alloc("w", &[3, 4], Init::Xavier);
        let z = b.alloc("z", &[4], Init::Zeros);
        let store: ParamStore = ParamStore::initialize(b.specs(), &mut Rng::new(0));
        assert_eq!(store.name(w), "w");
        assert_eq!(store.get(z).data(), &[0.0; 4]);
        assert_eq!(store.num_scalars(), 16);
        let limit = (6.0f32 / 7.0).sqrt();
        assert!(store.get(w).data().iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn from_named_rejects_mismatch() {
        let mut b = LayoutBuilder::new();
        b.alloc("w", &[2, 2], Init::Ones);
        let specs = b.finish();
        let bad = vec![("w".to_string(), Tensor::<f32>::zeros(&[2, 3]))];
        assert!(ParamStore::from_named(&specs, bad).is_err());
        let renamed = vec![("v".to_string(), Tensor::<f32>::zeros(&[2, 2]))];
        assert!(ParamStore::from_named(&specs, renamed).is_err());
    }
}
