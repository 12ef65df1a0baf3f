//! Named parameter storage shared by all model components.

use std::collections::BTreeMap;

use crate::error::{DcerError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether decoupled weight decay applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Apply,
    Exempt,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    decay: Decay,
}

/// Ordered collection of named, trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: Decay) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor: tensor.with_grad(),
            decay,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decay(&self, id: ParamId) -> Decay {
        self.entries[id.0].decay
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: &Tensor) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if t.shape() != value.shape() {
            return Err(DcerError::shape("param set", t.shape(), value.shape()));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }
}

/// Dense per-parameter gradient accumulator, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Option<Vec<f32>>>,
}

impl GradBuffer {
    pub fn new(params: &ParamStore) -> Self {
        GradBuffer {
            grads: vec![None; params.len()],
        }
    }

    pub fn add(&mut self, id: ParamId, g: &[f32]) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Adds another buffer element-wise, in parameter order.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Writes the accumulated gradients into the parameter tensors.
    pub fn apply_to(&self, params: &mut ParamStore) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                params.get_mut(ParamId(i)).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}
