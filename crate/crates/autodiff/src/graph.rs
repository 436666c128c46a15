use std::cell::{Cell, RefCell};
use std::fmt;

use crate::ops::{self, Op};
use crate::{Array, AutodiffError, Result};

pub(crate) struct Node {
    pub value: Array,
    pub requires_grad: bool,
    pub op: Op,
}

/// Append-only record of a computation.
///
/// A graph is single-threaded; build one graph per worker when running in
/// parallel.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Array>>>,
    backward_done: Cell<bool>,
}

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Trainable leaf; gradients are collected for it.
    pub fn param(&self, value: Array) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Array, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    /// Reverse-mode sweep from a one-element root.
    ///
    /// Runs at most once per graph; a second call is an error rather than a
    /// silent accumulation.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        if self.backward_done.get() {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[root.id] = Some(Array::full(root_value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                for (parent, contribution) in ops::backward_rule(&nodes, node, &upstream) {
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => acc.add_assign(&contribution),
                        slot => *slot = Some(contribution),
                    }
                }
            }
            grads[id] = Some(upstream);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the backward root with respect to `var`.
    ///
    /// `None` before backward, for constants, and for nodes the root does
    /// not depend on.
    pub fn grad(&self, var: Var<'_>) -> Option<Array> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Array {
        self.graph.with_nodes(|n| n[self.id].value.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_nodes(|n| n[self.id].value.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.with_nodes(|n| n[self.id].requires_grad)
    }

    /// The single element of a one-element node.
    pub fn scalar(&self) -> Option<f64> {
        self.graph.with_nodes(|n| n[self.id].value.item())
    }

    pub(crate) fn check_same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }
}
