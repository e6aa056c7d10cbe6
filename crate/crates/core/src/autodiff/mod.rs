//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`] holding the
//! forward value and enough context to run the adjoint later. Calling
//! [`Tape::backward`] consumes the tape, replays the nodes in reverse order
//! and returns a [`Gradients`] table keyed by [`Var`].
//!
//! ```
//! use gvt2rpm::autodiff::Tape;
//! use gvt2rpm::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let loss = tape.sum(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```
//!
//! A tape belongs to one thread; independent tapes may run in parallel.

mod attention;
mod conv;
mod elementwise;
mod kernels;
pub mod gemm;
mod linear;
mod norm;

pub use attention::{AttentionWeights, RelBias};
pub use norm::{BatchNormState, NormMode};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    TileBatch(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv3d(conv::Conv3dCtx),
    DepthwiseConv3d(conv::DepthwiseCtx),
    LayerNorm(norm::LayerNormCtx),
    BatchNorm(norm::BatchNormCtx),
    Attention(Box<attention::AttentionCtx>),
    Upsample { x: Var, factor: [usize; 3] },
    Elu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    Mean { x: Var, axes: Vec<usize> },
    Sum(Var),
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, consuming the tape.
    ///
    /// Gradients of a tensor used several times are summed over its uses.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            nodes: &self.nodes,
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: (0..self.nodes.len()).map(|_| None).collect(),
            });
        }
        sink.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut sink);
            sink.grads[i] = Some(g);
        }
        let grads = sink
            .grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match node.op {
                Op::Leaf => g.map(|g| Tensor::new(node.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], sink: &mut GradSink<'_>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.accumulate(*a, g);
                sink.accumulate(*b, g);
            }
            Op::Scale(x, c) => {
                if let Some(dx) = sink.slot(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
                }
            }
            Op::Reshape(x) => sink.accumulate(*x, g),
            Op::Permute { x, perm } => elementwise::permute_backward(self, *x, perm, g, sink),
            Op::TileBatch(x) => {
                if let Some(dx) = sink.slot(*x) {
                    let n = dx.len();
                    for chunk in g.chunks(n) {
                        dx.iter_mut().zip(chunk).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Linear { x, w, b } => linear::linear_backward(self, *x, *w, *b, g, sink),
            Op::Conv3d(ctx) => conv::conv3d_backward(self, ctx, g, sink),
            Op::DepthwiseConv3d(ctx) => conv::depthwise_backward(self, ctx, g, sink),
            Op::LayerNorm(ctx) => norm::layernorm_backward(self, ctx, g, sink),
            Op::BatchNorm(ctx) => norm::batchnorm_backward(self, ctx, g, sink),
            Op::Attention(ctx) => attention::attention_backward(self, ctx, &node.value, g, sink),
            Op::Upsample { x, factor } => elementwise::upsample_backward(self, *x, *factor, g, sink),
            Op::Elu(x) => elementwise::elu_backward(self, *x, &node.value, g, sink),
            Op::Gelu(x) => elementwise::gelu_backward(self, *x, g, sink),
            Op::Softmax { x, axis } => {
                elementwise::softmax_backward(*x, *axis, &node.value, g, sink)
            }
            Op::Mean { x, axes } => elementwise::mean_backward(self, *x, axes, g, sink),
            Op::Sum(x) => {
                if let Some(dx) = sink.slot(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mse { pred, target } => elementwise::mse_backward(self, *pred, *target, g, sink),
        }
    }
}

/// Lazily allocated gradient buffers for every node during backward.
pub(crate) struct GradSink<'a> {
    grads: Vec<Option<Vec<f64>>>,
    nodes: &'a [Node],
}

impl GradSink<'_> {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(d) = self.slot(v) {
            d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
        }
    }
}

/// Gradients of leaf tensors after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it does not require grad or is unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 2], 0.7), true);
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn scalar_chain_rule() {
        // loss = mse(w*x, y) with w=2, x=3, y=5 -> dL/dw = 2 * (6 - 5) * 3
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[3.0]));
        let w = tape.leaf(t(&[1, 1], &[2.0]), true);
        let y = tape.constant(t(&[1, 1], &[5.0]));
        let wx = tape.linear(x, w, None).unwrap();
        let loss = tape.mse_loss(wx, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn reuse_accumulates_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.2, 2.0]), true);
        let e = tape.elu(x);
        let g = tape.gelu(x);
        let s = tape.add(e, g).unwrap();
        let loss = tape.sum(s);
        let both = tape.backward(loss).unwrap();

        let mut tape = Tape::new();
        let x1 = tape.leaf(t(&[3], &[0.3, -1.2, 2.0]), true);
        let e = tape.elu(x1);
        let loss = tape.sum(e);
        let only_elu = tape.backward(loss).unwrap();

        let mut tape = Tape::new();
        let x2 = tape.leaf(t(&[3], &[0.3, -1.2, 2.0]), true);
        let g = tape.gelu(x2);
        let loss = tape.sum(g);
        let only_gelu = tape.backward(loss).unwrap();

        for i in 0..3 {
            let expected = only_elu.get(x1).unwrap().data()[i] + only_gelu.get(x2).unwrap().data()[i];
            assert_eq!(both.get(x).unwrap().data()[i], expected);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2]));
        let w = tape.leaf(Tensor::ones(&[2]), true);
        let s = tape.add(x, w).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
