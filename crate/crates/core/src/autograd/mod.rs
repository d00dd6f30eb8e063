//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is built eagerly: every builder method evaluates its node
//! immediately and records the operation, so the node list is always in
//! topological order. After [`Graph::backward`] each node that depends on a
//! trainable leaf holds `∂loss/∂value`. Leaves can be reassigned and the whole
//! graph replayed with [`Graph::recompute`], which is what the finite
//! difference checker relies on.
//!
//! Leaves may borrow their value (`leaf_ref`) so that model parameters are not
//! copied into every graph.

mod activation;
mod gradcheck;
mod ops;

pub use activation::Activation;
pub use gradcheck::{finite_diff_check, relative_error};
pub use ops::{primitive_set, Axis, Fault, OpKind, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use ops::{evaluate, local_backward, Cache, Op};
use std::borrow::Cow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Matrix<T>>,
    cache: Cache<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Options for the fused Kronecker-linear primitive.
#[derive(Debug, Clone, Copy, Default)]
pub struct KronLinearOptions {
    /// `b₁×a₂` bias added after the first product.
    pub mid_bias: Option<NodeId>,
    /// Nonlinearity applied between the two products.
    pub activation: Activation,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Matrix<T>>>,
    loss: Option<NodeId>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            loss: None,
            fault: None,
        }
    }

    /// Installs a deliberate backward fault (negative control for gradient checks).
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Matrix<T>>, cache: Cache<T>, trainable: bool) -> NodeId {
        let requires_grad = trainable || op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            cache,
            requires_grad,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::Graph(format!("unknown node {}", id.0))),
            None => Ok(()),
        }
    }

    fn record(&mut self, op: Op<T>) -> Result<NodeId> {
        self.check(&op.inputs())?;
        let nodes = &self.nodes;
        let (value, cache) = evaluate(&op, |id| nodes[id.0].value.as_ref())?;
        Ok(self.push(op, Cow::Owned(value), cache, false))
    }

    /// Leaf that owns its value.
    pub fn leaf(&mut self, value: Matrix<T>, trainable: bool) -> NodeId {
        self.push(Op::Leaf, Cow::Owned(value), Cache::None, trainable)
    }

    /// Leaf that borrows its value.
    pub fn leaf_ref(&mut self, value: &'a Matrix<T>, trainable: bool) -> NodeId {
        self.push(Op::Leaf, Cow::Borrowed(value), Cache::None, trainable)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn op_kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes[id.0].op.kind()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Gradient of the loss w.r.t. `id`, available after [`backward`](Self::backward).
    pub fn grad(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul { a, b, transpose_b: false })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul { a, b, transpose_b: true })
    }

    /// Elementwise sum; a `1×cols` right operand is broadcast over rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let broadcast = sa != sb && sb.0 == 1 && sb.1 == sa.1;
        self.record(Op::Add { a, b, broadcast })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.record(Op::Scale { a, factor })
    }

    /// Multiplies `a` by the value of the `1×1` node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.record(Op::ScaleBy { a, s })
    }

    /// Applies `act` pointwise; [`Activation::None`] returns `a` unchanged.
    pub fn activation(&mut self, a: NodeId, act: Activation) -> Result<NodeId> {
        if act == Activation::None {
            self.check(&[a])?;
            return Ok(a);
        }
        self.record(Op::Act { a, act })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softmax { a })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::LayerNorm { x, gain, bias })
    }

    pub fn embedding(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.record(Op::Embedding { table, indices })
    }

    /// Mean cross-entropy of row-wise softmax(logits) against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.record(Op::CrossEntropy { logits, labels })
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.record(Op::Mse { pred, target })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>, axis: Axis) -> Result<NodeId> {
        self.record(Op::Concat { parts, axis })
    }

    pub fn slice(&mut self, a: NodeId, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<NodeId> {
        self.record(Op::Slice { a, r0, c0, rows, cols })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum { a })
    }

    /// `X·(A⊗B)` row by row, without forming `A⊗B`.
    pub fn kron_linear(&mut self, x: NodeId, a: NodeId, b: NodeId, opts: KronLinearOptions) -> Result<NodeId> {
        self.record(Op::KronLinear {
            x,
            a,
            b,
            mid_bias: opts.mid_bias,
            act: opts.activation,
        })
    }

    /// Replaces a leaf's value (shape must match).
    pub fn set_value(&mut self, id: NodeId, value: Matrix<T>) -> Result<()> {
        self.check(&[id])?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Graph(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::dim("set_value", "leaf shape cannot change"));
        }
        node.value = Cow::Owned(value);
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let (value, cache) = evaluate(&node.op, |id| done[id.0].value.as_ref())?;
            node.value = Cow::Owned(value);
            node.cache = cache;
        }
        Ok(())
    }

    /// Fills gradient slots with `∂loss/∂value` for every node on a path
    /// from a trainable leaf to `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(&[loss])?;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Graph("loss must be a 1x1 node".into()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        self.loss = Some(loss);
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                let nodes = &self.nodes;
                let contributions = local_backward(
                    &node.op,
                    &node.cache,
                    node.value.as_ref(),
                    &grad,
                    |id| nodes[id.0].value.as_ref(),
                    |id| nodes[id.0].requires_grad,
                    self.fault,
                );
                for (id, g) in contributions {
                    match &mut self.grads[id.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    /// The loss node of the last backward pass.
    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }
}

#[cfg(test)]
mod tests;
