use indexmap::IndexMap;

use super::{Grads, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which part of the model a parameter belongs to. Freezing is decided by
/// group, never by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
    Peft,
    Gist,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Head => 1,
            ParamGroup::Peft => 2,
            ParamGroup::Gist => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<F> {
    tensor: Tensor<F>,
    group: ParamGroup,
}

/// Ordered collection of named parameters. Insertion order is the
/// serialization and optimizer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Entry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registers a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let tensor = tensor.with_requires_grad(true);
        let (idx, _) = self.entries.insert_full(name, Entry { tensor, group });
        Ok(ParamId(idx))
    }

    /// Replaces the value of an existing parameter, keeping its flags.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor<F>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        let requires_grad = entry.tensor.requires_grad();
        entry.tensor = tensor.with_requires_grad(requires_grad);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid param id").0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>, ParamGroup)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (name, e))| (ParamId(i), name.as_str(), &e.tensor, e.group))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        !self.get(id).requires_grad()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.get_mut(id).set_requires_grad(!frozen);
    }

    /// name → frozen flag, in store order.
    pub fn freeze_map(&self) -> IndexMap<String, bool> {
        self.entries
            .iter()
            .map(|(name, e)| (name.clone(), !e.tensor.requires_grad()))
            .collect()
    }

    /// Number of scalars that receive gradients.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn trainable_count_in(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|e| e.group == group && e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
    }

    /// Adds the gradients of every parameter leaf on `tape` into the
    /// parameters' buffers. Frozen parameters are skipped.
    pub fn accumulate(&mut self, tape: &Tape<F>, grads: &Grads<F>) -> Result<()> {
        for (var, id) in tape.param_leaves() {
            if let Some(g) = grads.get(var) {
                self.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Casts every parameter to another precision, keeping freeze flags.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(name, e)| {
                    (
                        name.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            group: e.group,
                        },
                    )
                })
                .collect(),
        }
    }
}
