use std::collections::BTreeMap;

use super::{Gradients, Tensor};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Named parameter tensors of one model component, in registration order.
///
/// Names are expected to be globally unique across the stores that share
/// a graph, since gradients are routed back by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a trainable tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every gradient the graph produced for this store's parameters.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.param(name) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Freezes or unfreezes every tensor in the store.
    pub fn set_trainable(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    /// Overwrites values from `source`, matching by name and shape.
    pub fn load_from(&mut self, source: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(src) = source.get(name) else {
                return Err(crate::Error::Checkpoint(format!("missing tensor {name}")));
            };
            ensure!(src.shape() == t.shape(), "tensor {name}: shape {:?} != {:?}", src.shape(), t.shape());
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
