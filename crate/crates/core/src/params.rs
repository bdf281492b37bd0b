//! Named parameter storage shared by training, inference, and checkpoints.

use crate::error::Result;
use crate::tensor::{Scalar, Tape, TensorData, Var};

/// Index of a parameter inside a `ParamSet`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PIdx(pub usize);

/// Flat list of named tensors. Model layouts hold `PIdx` handles into it.
#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<TensorData>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: TensorData) -> PIdx {
        self.names.push(name.into());
        self.tensors.push(t);
        PIdx(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: PIdx) -> &TensorData {
        &self.tensors[i.0]
    }

    pub fn get_mut(&mut self, i: PIdx) -> &mut TensorData {
        &mut self.tensors[i.0]
    }

    pub fn name(&self, i: PIdx) -> &str {
        &self.names[i.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn total_elems(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Bind every parameter as a differentiable leaf on `tape`, in index
    /// order. `vars[i]` corresponds to `PIdx(i)`.
    pub fn bind<F: Scalar>(&self, tape: &Tape<F>) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.to_vec(), t.shape.clone(), true))
            .collect()
    }

    /// Rebuild from named tensors (checkpoint load). Order matters.
    pub fn from_entries(entries: Vec<(String, TensorData)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        ParamSet { names, tensors }
    }

    pub fn into_entries(self) -> Vec<(String, TensorData)> {
        self.names.into_iter().zip(self.tensors).collect()
    }
}
