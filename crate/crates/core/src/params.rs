//! Named parameter storage and the SGD-with-momentum optimizer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which learning rate a parameter follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Shared embedding and trunk.
    Main,
    /// Private parameters of one branch pathway.
    Branch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect()
    }

    /// Replaces all values from `(name, tensor)` pairs, which must match this
    /// store's names and shapes exactly. Every mismatch is reported.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut problems = Vec::new();
        let mut incoming: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        let mut fresh = Vec::with_capacity(self.values.len());
        for (name, current) in self.names.iter().zip(&self.values) {
            match incoming.remove(name) {
                None => problems.push(format!("{name}: missing")),
                Some(t) if t.shape() != current.shape() => problems.push(format!(
                    "{name}: shape {:?} does not match model shape {:?}",
                    t.shape(),
                    current.shape()
                )),
                Some(t) => fresh.push(t),
            }
        }
        let mut extra: Vec<_> = incoming.into_keys().collect();
        extra.sort();
        problems.extend(
            extra
                .into_iter()
                .map(|n| format!("{n}: not a model parameter")),
        );
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: {}",
                problems.join("; ")
            )));
        }
        self.values = fresh;
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    /// When set, a step's gradients are rescaled so their global L2 norm
    /// does not exceed this value.
    pub clip_norm: Option<f64>,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Self {
        self.clip_norm = max_norm;
        self
    }

    /// Scales `grads` in place to respect [`Sgd::clip_norm`]; returns the
    /// norm before clipping.
    pub fn clip(&self, grads: &mut [Tensor]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if let Some(max) = self.clip_norm {
            if norm > max {
                let scale = max / norm;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }

    /// Updates one parameter; `slot` identifies its velocity buffer.
    pub fn update(
        &mut self,
        slot: usize,
        param: &mut Tensor,
        grad: &Tensor,
        lr: f64,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let v = self.velocity[slot].get_or_insert_with(|| vec![0.0; grad.numel()]);
        for ((p, vi), g) in param
            .data_mut()
            .iter_mut()
            .zip(v.iter_mut())
            .zip(grad.data())
        {
            *vi = self.momentum * *vi + g;
            *p -= lr * *vi;
        }
        Ok(())
    }
}
