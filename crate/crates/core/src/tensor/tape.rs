use std::collections::HashMap;

use super::ops::Op;
use super::{Group, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Linear record of operations. Nodes are appended in evaluation order, so
/// index order is a topological order of the graph.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    freed: bool,
    trainable: Option<Vec<Group>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which every registered parameter is trainable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            freed: false,
            trainable: None,
            param_vars: HashMap::new(),
        }
    }

    /// Only parameters of `groups` receive gradients; the rest are constants.
    pub fn training(groups: &[Group]) -> Self {
        Self {
            trainable: Some(groups.to_vec()),
            ..Self::new()
        }
    }

    /// No parameter receives gradients.
    pub fn inference() -> Self {
        Self::training(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn is_trainable(&self, g: Group) -> bool {
        self.trainable.as_ref().is_none_or(|t| t.contains(&g))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        if self.freed {
            Err(Error::GraphFreed)
        } else {
            Ok(())
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        self.check_live()?;
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Result<Var> {
        self.check_live()?;
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf", index });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, false, None)
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, true, None)
    }

    /// Copy of a stored parameter. Registering the same id twice returns the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let rg = self.is_trainable(p.group);
        let v = self.push_leaf(p.value.clone(), rg, Some(id))?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Reverse-mode sweep from a scalar root. Consumes the recorded graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.check_live()?;
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    index,
                });
            }
            match &node.op {
                Op::Leaf => match node.param {
                    Some(pid) => out.params.push((pid, g)),
                    None => {
                        out.vars.insert(i, g);
                    }
                },
                op => {
                    for (parent, pg) in op.vjp(&self.nodes, i, &g)? {
                        if !self.nodes[parent].requires_grad {
                            continue;
                        }
                        match &mut grads[parent] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }

        // Trainable parameters the root does not depend on get zero gradients.
        for (&pid, &v) in &self.param_vars {
            let node = &self.nodes[v.0];
            if node.requires_grad && !out.params.iter().any(|(p, _)| *p == pid) {
                out.params.push((pid, vec![0.0; node.value.len()]));
            }
        }
        out.params.sort_by_key(|(p, _)| *p);

        self.nodes.clear();
        self.param_vars.clear();
        self.freed = true;
        Ok(out)
    }

    /// `backward` followed by accumulation into the store.
    pub fn backward_into(&mut self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(root)?;
        store.accumulate(&g);
        Ok(g)
    }
}

/// Result of a backward sweep.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    vars: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Vec<f64>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient of a [`Tape::variable`] leaf; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(&v.0).map(|g| g.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_square_sum() {
        let mut g = Tape::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let y = g.square(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_linear_is_ones() {
        let mut g = Tape::new();
        let x = g.variable(Tensor::from_vec(vec![3.0, -1.0, 0.5])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let mut g = Tape::new();
        let x = g.variable(Tensor::scalar(0.0)).unwrap();
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Tape::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn second_backward_is_freed() {
        let mut g = Tape::new();
        let x = g.variable(Tensor::scalar(2.0)).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphFreed)));
    }

    #[test]
    fn store_accumulates_across_graphs() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Aux, Tensor::from_vec(vec![1.0, 2.0]));
        for _ in 0..2 {
            let mut g = Tape::new();
            let w = g.param(&store, id).unwrap();
            let y = g.square(w).unwrap();
            let s = g.sum(y).unwrap();
            g.backward_into(s, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::FlowVisible, Tensor::scalar(1.0));
        let b = store.add("b", Group::DiscVisible, Tensor::scalar(2.0));
        let mut g = Tape::training(&Group::FLOWS);
        let va = g.param(&store, a).unwrap();
        let vb = g.param(&store, b).unwrap();
        let p = g.mul(va, vb).unwrap();
        g.backward_into(p, &mut store).unwrap();
        assert_eq!(store.get(a).grad.as_deref(), Some(&[2.0][..]));
        assert!(store.get(b).grad.is_none());
    }

    #[test]
    fn unreached_trainable_param_gets_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Aux, Tensor::scalar(1.0));
        let b = store.add("b", Group::Aux, Tensor::scalar(2.0));
        let mut g = Tape::new();
        let va = g.param(&store, a).unwrap();
        let _ = g.param(&store, b).unwrap();
        let y = g.square(va).unwrap();
        g.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get(b).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn param_registered_once() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Aux, Tensor::scalar(3.0));
        let mut g = Tape::new();
        let v1 = g.param(&store, a).unwrap();
        let v2 = g.param(&store, a).unwrap();
        assert_eq!(v1, v2);
        let y = g.mul(v1, v2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(a).unwrap(), &[6.0]);
    }
}
