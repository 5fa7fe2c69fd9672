//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the leaves that were
//! registered with `requires_grad`.

use std::borrow::Cow;

use crate::{Error, Result};

use super::ops::{self, ConvCache, ConvGeom, PoolMode};
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv3d,
    LeakyRelu,
    GlobalMaxPool,
    GlobalAvgPool,
    FullyConnected,
    Sigmoid,
    Softmax,
    Concat,
    Multiply,
    Flatten,
    CrossEntropy,
    WeightedSum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::FullyConnected => "fully_connected",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Concat => "concat",
            OpKind::Multiply => "multiply",
            OpKind::Flatten => "flatten",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::WeightedSum => "weighted_sum",
        }
    }
}

/// Deliberate corruption of one op's backward pass. Test fixture for the
/// gradient checker's negative control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { geom: ConvGeom },
    LeakyRelu { slope: f64 },
    GlobalPool { mode: PoolMode, argmax: Vec<usize> },
    Linear,
    Sigmoid,
    Softmax,
    Concat { split: usize },
    Multiply,
    Flatten,
    CrossEntropy,
    WeightedSum { weights: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::GlobalPool { mode: PoolMode::Max, .. } => OpKind::GlobalMaxPool,
            Op::GlobalPool { mode: PoolMode::Avg, .. } => OpKind::GlobalAvgPool,
            Op::Linear => OpKind::FullyConnected,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softmax => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Multiply => OpKind::Multiply,
            Op::Flatten => OpKind::Flatten,
            Op::CrossEntropy => OpKind::CrossEntropy,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    fault: Option<Fault>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn ensure_finite(t: &Tensor, what: OpKind) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} forward", what.name())))
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward pass for `fault.op` is scaled by `fault.scale`.
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        ensure_finite(&value, op.kind())?;
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Registers a tensor owned by the graph. Gradients flow to it when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Cow::Owned(value), Op::Leaf, Vec::new())
    }

    /// Registers a borrowed tensor (typically a model parameter) without
    /// copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Result<NodeId> {
        self.push(Cow::Borrowed(value), Op::Leaf, Vec::new())
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let y = ops::conv3d_forward(self.value(x), self.value(w), self.value(b), &geom)?;
        self.push(Cow::Owned(y), Op::Conv3d { geom }, vec![x, w, b])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let y = Tensor::from_vec(xv.shape(), ops::leaky_relu(xv.data(), slope))?;
        self.push(Cow::Owned(y), Op::LeakyRelu { slope }, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.leaky_relu(x, 0.0)
    }

    pub fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (y, argmax) = ops::global_pool(self.value(x), mode)?;
        self.push(Cow::Owned(y), Op::GlobalPool { mode, argmax }, vec![x])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(Cow::Owned(y), Op::Linear, vec![x, w, b])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let y = Tensor::from_vec(xv.shape(), ops::sigmoid(xv.data()))?;
        self.push(Cow::Owned(y), Op::Sigmoid, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::softmax(self.value(x))?;
        self.push(Cow::Owned(y), Op::Softmax, vec![x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat(self.value(a), self.value(b))?;
        let split = self.value(a).shape()[1];
        self.push(Cow::Owned(y), Op::Concat { split }, vec![a, b])
    }

    /// `gate [N,C]` times `x [N,C,...]`.
    pub fn multiply_broadcast(&mut self, gate: NodeId, x: NodeId) -> Result<NodeId> {
        let y = ops::multiply_broadcast(self.value(gate), self.value(x))?;
        self.push(Cow::Owned(y), Op::Multiply, vec![gate, x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::flatten(self.value(x))?;
        self.push(Cow::Owned(y), Op::Flatten, vec![x])
    }

    /// Scalar mean cross-entropy of softmax probabilities against one-hot
    /// targets. The targets node never receives a gradient.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: NodeId) -> Result<NodeId> {
        let loss = ops::cross_entropy(self.value(probs), self.value(targets))?;
        self.push(Cow::Owned(Tensor::scalar(loss)), Op::CrossEntropy, vec![probs, targets])
    }

    /// Scalar `sum(weights * x)`; a convenient loss for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(Error::LengthMismatch {
                expected: xv.numel(),
                got: weights.len(),
            });
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::WeightedSum { weights }, vec![x])
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let kind = node.op.kind();
            let mut contributions = self.node_backward(node, &upstream)?;
            if let Some(fault) = self.fault.filter(|f| f.op == kind) {
                for (_, g) in &mut contributions {
                    g.iter_mut().for_each(|v| *v *= fault.scale);
                }
            }
            for (target, g) in contributions {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{} backward", kind.name())));
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn node_backward(&self, node: &Node<'a>, up: &[f64]) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let inp = &node.inputs;
        let v = |i: usize| self.value(inp[i]);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d { geom } => {
                let upstream = Tensor::from_vec(node.value.shape(), up.to_vec())?;
                let cache = ConvCache {
                    input: v(0),
                    weights: v(1),
                    geom: *geom,
                };
                let g = ops::conv3d_backward(&upstream, &cache, self.wants(inp[0]))?;
                let mut out = vec![(inp[1], g.weights.into_data()), (inp[2], g.bias.into_data())];
                if let Some(dx) = g.input {
                    out.push((inp[0], dx.into_data()));
                }
                out
            }
            Op::LeakyRelu { slope } => {
                vec![(inp[0], ops::leaky_relu_backward(v(0).data(), up, *slope))]
            }
            Op::GlobalPool { mode, argmax } => {
                vec![(inp[0], ops::global_pool_backward(v(0).shape(), up, *mode, argmax))]
            }
            Op::Linear => {
                let (dx, dw, db) = ops::linear_backward(v(0), v(1), up, self.wants(inp[0]));
                let mut out = vec![(inp[1], dw), (inp[2], db)];
                if let Some(dx) = dx {
                    out.push((inp[0], dx));
                }
                out
            }
            Op::Sigmoid => vec![(inp[0], ops::sigmoid_backward(node.value.data(), up))],
            Op::Softmax => vec![(inp[0], ops::softmax_backward(&node.value, up))],
            Op::Concat { split } => {
                let (da, db) = ops::concat_backward(*split, node.value.shape()[1], up);
                vec![(inp[0], da), (inp[1], db)]
            }
            Op::Multiply => {
                let (dg, dx) = ops::multiply_broadcast_backward(v(0), v(1), up);
                vec![(inp[0], dg), (inp[1], dx)]
            }
            Op::Flatten => vec![(inp[0], up.to_vec())],
            Op::CrossEntropy => {
                vec![(inp[0], ops::cross_entropy_backward(v(0), v(1), up[0]))]
            }
            Op::WeightedSum { weights } => {
                vec![(inp[0], weights.iter().map(|w| w * up[0]).collect())]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_reach_only_requested_leaves() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([1, 3], 1.0)).unwrap();
        let w = g
            .leaf(Tensor::from_vec([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_requires_grad(true))
            .unwrap();
        let b = g.leaf(Tensor::zeros([2]).with_requires_grad(true)).unwrap();
        let y = g.linear(x, w, b).unwrap();
        let loss = g.weighted_sum(y, vec![1.0, -1.0]).unwrap();
        assert_eq!(g.value(loss).data(), &[6.0 - 15.0]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, -1.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec([1, 2], vec![0.3, -0.2]).unwrap().with_requires_grad(true)).unwrap();
        let c = g.concat(x, x).unwrap();
        let loss = g.weighted_sum(c, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec([1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let w = g.leaf(Tensor::full([1, 2], f64::MAX)).unwrap();
        let b = g.leaf(Tensor::zeros([1])).unwrap();
        assert!(matches!(g.linear(x, w, b), Err(Error::NonFinite(_))));
        assert!(g.leaf(Tensor::full([1], f64::NAN)).is_err());
    }

    #[test]
    fn fault_scales_backward() {
        let mut g = Graph::with_fault(Fault {
            op: OpKind::Sigmoid,
            scale: 2.0,
        });
        let x = g.leaf(Tensor::zeros([1, 1]).with_requires_grad(true)).unwrap();
        let s = g.sigmoid(x).unwrap();
        let loss = g.weighted_sum(s, vec![1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5]);
    }
}
