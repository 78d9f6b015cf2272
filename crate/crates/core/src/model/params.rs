//! Named parameter storage and per-graph binding.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable tensors of a model, each under a unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<S>>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    /// Registers a tensor. Panics on duplicate names, which would indicate
    /// a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).map(|id| self.get(id).len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(|v| Rc::new(v.cast())).collect() }
    }

    /// Binds every tensor as a leaf of `g`; `trainable` leaves collect gradients.
    pub fn bind<'g>(&self, g: &'g Graph<S>, trainable: bool) -> Ctx<'g, S> {
        let vars = self.values.iter().map(|v| g.leaf_rc(Rc::clone(v), trainable)).collect();
        Ctx { g, vars }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A graph together with the leaves bound to each parameter.
pub struct Ctx<'g, S: Scalar> {
    pub g: &'g Graph<S>,
    vars: Vec<Var>,
}

impl<'g, S: Scalar> Ctx<'g, S> {
    pub fn from_vars(g: &'g Graph<S>, vars: Vec<Var>) -> Self {
        Ctx { g, vars }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Initialization source for one module. Seeding by `(seed, module name)`
/// keeps every module's weights independent of which other modules exist.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64, module: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(module.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        Init { rng: ChaCha8Rng::from_seed(digest) }
    }

    /// Normal entries with standard deviation `std`.
    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let d = Normal::new(0.0, std).unwrap();
        Tensor::new(shape, (0..n).map(|_| d.sample(&mut self.rng) as f32).collect())
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<f32> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.gen_range(-bound..=bound) as f32).collect())
    }
}
