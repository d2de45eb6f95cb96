//! Parameters, layers, checkpoints and optimisation.
//!
//! Models own a [`ParamStore`] and refer to their weights through
//! [`ParamId`]s. A forward pass binds the store onto a fresh [`Tape`]; the
//! resulting [`Binding`] hands out the leaf [`Var`] of each parameter.

pub mod checkpoint;
mod layers;
mod optim;

use std::collections::HashMap;

use sha2::{Digest, Sha256};

pub use layers::{
    attention, LayerNorm, Linear, Mlp, MultiHeadAttention, PatchEmbed, SelfAttentionBlock,
};
pub use optim::{GradBuffer, LrSchedule, Sgd};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Places every parameter on `tape`, differentiable iff `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Binding<'t> {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Overwrites every parameter from named entries; names and shapes must match exactly.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(config_err!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.len()
            ));
        }
        for (name, tensor) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| config_err!("checkpoint tensor {name} unknown to model"))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(dim_err!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    self.get(id).shape()
                ));
            }
            *self.get_mut(id) = tensor;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.iter() {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            t.feed_bytes(&mut |b| hasher.update(b));
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The tape leaves of one [`ParamStore`] for one forward pass.
pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    /// Wraps caller-provided leaves, e.g. the probe variables of a gradient check.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Per-parameter gradients; parameters the root does not depend on get zeros.
    pub fn grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .raw(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; v.numel()])
            })
            .collect()
    }
}

pub(crate) fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(config_err!("{name} must be positive"));
    }
    Ok(())
}

pub(crate) fn expect_rows(op: &str, v: &Var<'_>, cols: usize) -> Result<usize> {
    match v.shape().as_slice() {
        [r, c] if *c == cols => Ok(*r),
        s => Err(dim_err!("{op}: expected [L×{cols}], got {s:?}")),
    }
}
