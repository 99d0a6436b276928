use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Ordered collection of named tensors. Trainable entries are learned
/// weights; the rest are buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(id))
    }

    /// Inserts a trainable tensor drawn from `uniform(-bound, bound)`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.insert(name, Tensor::uniform(shape.to_vec(), bound, rng), true)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor, bool)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor, e.trainable))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Copies every tensor of `other` into the entry of the same name.
    /// Both stores must hold the same names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::Invalid("parameter stores differ in size".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(TensorError::Invalid(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to parameter leaves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn from_parts(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    /// Gradient for `id`, or `None` when the parameter did not reach the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, with zeros for unreachable parameters.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => {
                    for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                        *a += b;
                    }
                }
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }
}
