use serde::{Deserialize, Serialize};

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// Which network a parameter belongs to. Freezing works per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    FlowVisible,
    FlowInfrared,
    EncoderVisible,
    EncoderInfrared,
    DiscVisible,
    DiscInfrared,
    /// Anything outside the Flow2Flow networks (tests, retrieval models).
    Aux,
}

impl Group {
    pub const FLOWS: [Group; 2] = [Group::FlowVisible, Group::FlowInfrared];
    pub const DISCRIMINATORS: [Group; 4] = [
        Group::EncoderVisible,
        Group::EncoderInfrared,
        Group::DiscVisible,
        Group::DiscInfrared,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

/// Owns every learnable tensor of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Add gradients from a backward pass onto the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grad_in(&self, groups: &[Group]) -> bool {
        self.params
            .iter()
            .any(|p| groups.contains(&p.group) && p.grad.is_some())
    }

    /// Overwrite a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.len() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// FNV-1a over the bit patterns of every value in the given groups.
    pub fn fingerprint(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}
