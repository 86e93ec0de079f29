use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a trainable tensor inside a [`ParamStore`].
///
/// Two layers holding the same `ParamId` share storage: an update through
/// either is visible to both. Layer tying is built on this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Owner of every trainable tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Gradients keyed by parameter, iterated in id order.
pub type GradMap = BTreeMap<ParamId, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn rename(&mut self, id: ParamId, name: impl Into<String>) {
        self.params[id.0].name = name.into();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Copies of the listed parameter values, for before/after comparisons.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.value(id).clone()).collect()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.value(id).numel()).sum()
    }
}

/// Adds `scale * grads` into `acc`, creating zero buffers on first touch.
pub fn accumulate(acc: &mut GradMap, grads: &GradMap, scale: f64) {
    for (id, g) in grads {
        acc.entry(*id)
            .or_insert_with(|| Tensor::zeros(g.shape()))
            .add_scaled(g, scale);
    }
}
