//! Named parameter storage and its binding onto a [`Tape`].

use std::ops::Index;

use crate::error::{Error, Result};
use crate::persist::Checkpoint;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Ordered, named tensors. Insertion order is the canonical order used for
/// checkpoints, optimizer state and gradient vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total scalar count, by enumeration of the stored tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    pub fn write_blocks(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (n, t) in self.iter() {
            ckpt.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Overwrites every parameter from `prefix`-qualified checkpoint blocks,
    /// checking shapes.
    pub fn read_blocks(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{n}");
            let src = ckpt
                .block(&key)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing block {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Tape variables for a whole [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store order; absent entries become zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
