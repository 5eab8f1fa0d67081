use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Recorded operation. Parents always have a smaller id than the node that
/// consumes them, so the tape order is a topological order.
pub(crate) enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    Clamp {
        a: NodeId,
        lo: T,
        hi: T,
    },
    MatMul(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reduce {
        a: NodeId,
        mean: bool,
        axes: Vec<usize>,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        eps: T,
    },
    Dropout {
        a: NodeId,
        mask: Vec<T>,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    Attention {
        qkv: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Tape of operations for one forward pass.
///
/// A graph and every [`Var`] it hands out are confined to one thread.
/// `backward` may run once; call [`Graph::reset`] to allow another pass.
pub struct Graph<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: NodeId,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Leaf whose gradient is collected by `backward`.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(t), Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Allows another `backward` over the same tape.
    pub fn reset(&self) {
        self.consumed.set(false);
    }

    pub(crate) fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: NodeId) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Every leaf created with
    /// `requires_grad` that the root depends on gets d(root)/d(leaf).
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(root.graph, self) {
            return Err(Error::Backward("root belongs to another graph".into()));
        }
        if self.consumed.get() {
            return Err(Error::Backward(
                "backward already ran on this graph; reset first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.id).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            super::ops::backprop(&nodes, id, &g, &mut grads);
        }
        self.consumed.set(true);
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is not a trainable leaf or does not influence the root.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the leaf's shape.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}
