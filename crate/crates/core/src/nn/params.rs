//! Parameter storage shared across training steps. Layers refer to their
//! weights by [`ParamId`]; values live here so the optimizer state and
//! checkpoints have one ordered, named view of every tensor.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Whether the optimizer updates the tensor (weights) or the forward pass
/// maintains it (e.g. batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Learnable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<S>, kind: ParamKind) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {shape:?} holds {numel} values, got {}",
                value.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(ParamEntry { name: name.to_string(), shape, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Registers an optimizer-updated tensor.
    pub fn add_param(&mut self, name: &str, shape: Vec<usize>, value: Vec<S>) -> Result<ParamId> {
        self.add(name, shape, value, ParamKind::Learnable)
    }

    /// Registers a forward-maintained tensor excluded from optimization.
    pub fn add_buffer(&mut self, name: &str, shape: Vec<usize>, value: Vec<S>) -> Result<ParamId> {
        self.add(name, shape, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    /// Looks a parameter up by its registered name.
    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    /// Total stored values across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradient slots produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    slots: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        Gradients { slots: vec![None; params.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, len: usize) -> &mut [S] {
        self.slots[id.0].get_or_insert_with(|| vec![S::ZERO; len]).as_mut_slice()
    }

    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Largest |g| across every slot; 0 when empty. Diagnostic for training
    /// logs and divergence checks.
    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|v| v.iter())
            .map(|g| g.to_f64().abs())
            .fold(0.0, f64::max)
    }
}
