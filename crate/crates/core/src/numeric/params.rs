use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Named parameters and buffers in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value: value.with_requires_grad(trainable),
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Records a parameter on `tape`; buffers are recorded as constants.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        if e.trainable {
            tape.param(id, &e.value)
        } else {
            tape.constant(e.value.clone())
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
        }
    }

    /// Adds the tape's parameter gradients into the stored tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (id, g) in tape.param_grads() {
            self.entries[id.0].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn set_value(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.numel() != data.len() {
            return Err(Error::invalid(format!(
                "{} values for parameter `{}` of shape {:?}",
                data.len(),
                e.name,
                e.value.shape()
            )));
        }
        e.value.data_mut().copy_from_slice(data);
        Ok(())
    }
}
