use std::ops::Index;

use crate::checkpoint::{Entry, EntryData};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of a store, from one [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding over caller-recorded variables, one per parameter in store
    /// order (e.g. the inputs handed out by [`crate::grad_check`]).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Adds the gradients of a backward pass into each parameter's `grad`.
    /// Parameters the loss does not reach receive zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        if bound.vars.len() != self.tensors.len() {
            return Err(TensorError::Contract(format!(
                "binding has {} parameters, store has {}",
                bound.vars.len(),
                self.tensors.len()
            )));
        }
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let n = t.len();
            let acc = t.grad.get_or_insert_with(|| vec![T::zero(); n]);
            if let Some(g) = grads.get(v) {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.grad = None);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        self.iter()
            .map(|(name, t)| Entry::from_tensor(name, t))
            .collect()
    }

    /// Overwrites values from checkpoint entries; names and shapes must match.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let entry = entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {name}")))?;
            if entry.shape != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            let values: Vec<T> = match &entry.data {
                EntryData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
                EntryData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            };
            t.data_mut().copy_from_slice(&values);
            t.grad = None;
        }
        Ok(())
    }
}
