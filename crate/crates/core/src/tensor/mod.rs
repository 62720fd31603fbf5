//! Dense f64 tensors, a define-by-run differentiation tape, and Adam.
//!
//! Model parameters live in a [`ParamStore`]. Each training step builds a
//! fresh [`Tape`], pulls parameters onto it as leaves, records the forward
//! computation, and calls [`Tape::backward`] on the scalar loss. The returned
//! [`Gradients`] are keyed by [`ParamId`] and fed to [`Adam`].

mod adam;
pub(crate) mod linalg;
mod tape;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use tape::{cosine_similarity, Gradients, Tape, Var, COSINE_EPS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            );
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any accumulated gradient.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient. No-op unless `requires_grad`.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return shape_err(
                "accumulate_grad",
                format!("gradient length {} vs {}", g.len(), self.data.len()),
            );
        }
        if !self.requires_grad {
            return Ok(());
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over the exact bit patterns of the data.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: String,
    tensor: Tensor,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainScope {
    All,
    None,
    Groups(Vec<String>),
}

/// Named, grouped parameters of one model state.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            group: group.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
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

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    /// Sets `requires_grad` on every parameter according to `scope`.
    pub fn set_trainable(&mut self, scope: &TrainScope) -> Result<()> {
        if let TrainScope::Groups(gs) = scope {
            let known = self.groups();
            if let Some(bad) = gs.iter().find(|g| !known.contains(g)) {
                return contract(format!("unknown parameter group '{bad}' (known: {known:?})"));
            }
        }
        for e in &mut self.entries {
            let on = match scope {
                TrainScope::All => true,
                TrainScope::None => false,
                TrainScope::Groups(gs) => gs.contains(&e.group),
            };
            e.tensor.set_requires_grad(on);
        }
        Ok(())
    }

    pub fn set_group_trainable(&mut self, group: &str, flag: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.tensor.set_requires_grad(flag);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad()).collect()
    }

    /// Adds `grads` into each trainable parameter's stored gradient.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            self.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Per-parameter checksums keyed by name, restricted to `groups` (all if empty).
    pub fn checksums(&self, groups: &[&str]) -> BTreeMap<String, u64> {
        self.entries
            .iter()
            .filter(|e| groups.is_empty() || groups.contains(&e.group.as_str()))
            .map(|e| (e.name.clone(), e.tensor.checksum()))
            .collect()
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.group.as_str(), &e.tensor))
    }

    /// Copies values of `ids` out of the store.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<(ParamId, Vec<f64>)> {
        ids.iter().map(|&id| (id, self.get(id).data().to_vec())).collect()
    }

    pub fn restore(&mut self, snap: &[(ParamId, Vec<f64>)]) {
        for (id, data) in snap {
            self.get_mut(*id).data_mut().copy_from_slice(data);
        }
    }
}
