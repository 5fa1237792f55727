use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::BadConfig(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor whose name also appears in `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = &self.names[id.0];
            let src = other
                .id(name)
                .ok_or_else(|| Error::format("checkpoint", format!("no tensor named {name}")))?;
            let src = other.get(src);
            if src.shape() != self.values[id.0].shape() {
                return Err(Error::shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = src.clone();
        }
        Ok(())
    }
}
