//! Named trainable parameters and their gradient buffers.

use std::collections::BTreeMap;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// A set of named parameter tensors plus mirror-shaped gradient buffers.
///
/// Slots are ordered by insertion; iteration order is deterministic and is
/// the order the optimizer visits parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    grads: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        self.insert_with(name, tensor, true)
    }

    /// A slot that is saved and loaded but never trained (e.g. frozen
    /// Fourier frequencies).
    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        self.insert_with(name, tensor, false)
    }

    fn insert_with(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let slot = self.tensors.len();
        self.grads.push(Tensor::zeros(tensor.shape().to_vec()));
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        Ok(slot)
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        self.trainable[slot]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingData(format!("parameter `{name}` not found")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_at(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn tensor_at(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_at_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.slot(name)?])
    }

    pub fn grad_at(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    /// Adds `delta` into the gradient buffer of `slot`.
    pub(crate) fn accumulate(&mut self, slot: usize, delta: &Tensor) -> Result<()> {
        let g = &mut self.grads[slot];
        if g.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_accumulate",
                lhs: g.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        for (gv, &dv) in g.data_mut().iter_mut().zip(delta.data().iter()) {
            *gv += dv;
        }
        Ok(())
    }

    /// Zeroes every gradient buffer; parameters are untouched.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Parameter and gradient buffers for one slot, for optimizer updates.
    pub(crate) fn split_at_mut(&mut self, slot: usize) -> (&mut Tensor, &Tensor) {
        (&mut self.tensors[slot], &self.grads[slot])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroing_grads_keeps_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.accumulate(0, &Tensor::vector(vec![0.5, 0.5])).unwrap();
        store.zero_grads();
        assert_eq!(store.tensor("w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(store.grad_at(0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn grad_buffers_mirror_shapes() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(3, 4, vec![0.0; 12]).unwrap())
            .unwrap();
        assert_eq!(store.grad_at(0).shape(), &[3, 4]);
    }
}
