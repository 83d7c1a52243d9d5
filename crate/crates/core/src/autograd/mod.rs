//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its result on a new node and records what it needs for the
//! backward pass. [`Graph::backward`] walks the tape once in reverse append
//! order and returns a [`Gradients`] table indexed by [`Var`].
//!
//! ```
//! use aird::autograd::Graph;
//! use aird::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! A graph is single-threaded; independent graphs may live on different
//! threads.

pub(crate) mod kernels;
mod ops;

pub use ops::{BinaryOp, ReduceOp, UnaryOp};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp floor applied to log and division inputs.
pub const CLAMP_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: ops::Op,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by one backward pass. Nodes the loss does not depend
/// on (or that do not require gradients) have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: ops::Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: ops::Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// `loss` must hold exactly one finite value. Gradients reaching a leaf
    /// are checked for NaN/Inf before being returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.check_finite("loss")?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, ops::Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            ops::backward_node(self, node, &dy, &mut grads);
        }

        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            out.push(match g {
                Some(data) => {
                    let t = Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data);
                    t.check_finite(&format!("gradient of node {i}"))?;
                    Some(t)
                }
                None => None,
            });
        }
        Ok(Gradients { grads: out })
    }
}
