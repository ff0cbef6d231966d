//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! is a valid topological order for the backward pass. Each op stores a closure
//! that maps the gradient of its output onto the gradients of its inputs.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::matrix::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch normalization uses batch statistics in `Train` and running statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) type BackwardFn = Box<dyn Fn(&Ctx<'_>, Var, &Matrix, &mut Grads)>;

pub(crate) struct Node {
    pub(crate) value: Matrix,
    pub(crate) requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Read access to forward values during the backward pass.
pub(crate) struct Ctx<'a> {
    nodes: &'a [Node],
}

impl Ctx<'_> {
    #[inline]
    pub(crate) fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }
}

/// Gradient accumulators, one per node that requires a gradient.
pub struct Grads {
    slots: Vec<Option<Matrix>>,
    requires: Vec<bool>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Accumulator for `v`, allocated on first use; `None` when `v` needs no gradient.
    #[inline]
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut Matrix> {
        if !self.requires[v.0] {
            return None;
        }
        let (r, c) = self.shapes[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    #[inline]
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the root with respect to `v` (zeros if nothing flowed into it).
    pub fn get(&self, v: Var) -> Matrix {
        match &self.slots[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Batch statistics emitted by a train-mode batch norm, applied to running
/// buffers by the optimizer loop.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    record: bool,
    bindings: HashMap<ParamId, Var>,
    pub(crate) stat_updates: Vec<StatUpdate>,
}

impl Graph {
    pub fn new(mode: Mode, record: bool) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            record,
            bindings: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// Train mode with gradient recording.
    pub fn training() -> Self {
        Self::new(Mode::Train, true)
    }

    /// Eval mode without gradient recording.
    pub fn inference() -> Self {
        Self::new(Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient when the graph records.
    pub fn variable(&mut self, value: Matrix) -> Var {
        let record = self.record;
        self.leaf(value, record)
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a parameter into the graph. Each parameter is bound at most once
    /// per graph, so gradients from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let value = store.read(id).clone();
        let requires = self.record && store.is_trainable(id);
        let v = self.leaf(value, requires);
        self.bindings.insert(id, v);
        v
    }

    pub(crate) fn push(
        &mut self,
        value: Matrix,
        parents: &[Var],
        backward: impl Fn(&Ctx<'_>, Var, &Matrix, &mut Grads) + 'static,
    ) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Matrix::scalar(1.0))
    }

    /// Backpropagate an explicit upstream gradient `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Matrix) -> Grads {
        assert_eq!(seed.shape(), self.shape(root));
        let n = self.nodes.len();
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        };
        if !grads.requires[root.0] {
            return grads;
        }
        grads.slots[root.0] = Some(seed);
        let ctx = Ctx { nodes: &self.nodes };
        for i in (0..=root.0).rev() {
            let Some(backward) = &self.nodes[i].backward else {
                continue;
            };
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            backward(&ctx, Var(i), &g, &mut grads);
        }
        grads
    }

    /// Parameter gradients keyed by parameter id.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = self
            .bindings
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(&id, &v)| (id, grads.get(v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }
}
