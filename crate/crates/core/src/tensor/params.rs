use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.lookup(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, tensor: tensor.with_grad() });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds every gradient in `grads` into the matching parameter's slot.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.params[id.0].tensor.accumulate_grad(g.data());
        }
    }
}

/// Gradients produced by one backward pass. Parameters that the loss does not
/// reach have no entry; [`Gradients::get`] reports zeros for them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub(crate) fn insert(&mut self, id: ParamId, g: Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn reached(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    /// Gradient for `id`, or zeros of the parameter's shape when unreached.
    pub fn get(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let scaled: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
            self.insert(id, Tensor::new(g.shape(), scaled).expect("same shape"));
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().flat_map(|t| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}
