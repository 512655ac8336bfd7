//! Named parameter tensors and their binding onto a graph.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{init, Gradients, Graph, Scalar, Tensor, Var};

/// Parameter tensors keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<F> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Initializes a weight with fan-in uniform values drawn from a stream
    /// keyed by `(seed, name)`.
    pub fn init_weight(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let key = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let t = init::fan_in_uniform(shape, fan_in, &mut rng_for(seed, &[key]));
        self.insert(name, t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// Graph handles for a parameter set.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Copies every parameter into `g` as a leaf; `trainable` decides which
    /// leaves receive gradients.
    pub fn bind<F: Scalar>(g: &mut Graph<F>, params: &Params<F>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen<F: Scalar>(g: &mut Graph<F>, params: &Params<F>) -> Bound {
        Bound::bind(g, params, |_| false)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Replaces one binding, e.g. with a grad-check input.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// Gradient per bound name, for names the sweep reached.
    pub fn grads<F: Scalar>(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|t| (k.clone(), t)))
            .collect()
    }
}
