//! Tape-based reverse-mode differentiation over a fixed operation table.
//!
//! A [`Graph`] is an append-only list of nodes. Every node owns its forward
//! value; parents always precede children, so the reverse of append order is a
//! valid topological order for the backward sweep.

mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel/stride/padding for the two spatial axes, `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window2d {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Window2d {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    /// Output extent along `axis` for an input extent `len`, or `None` when
    /// the padded input is shorter than the kernel.
    pub fn output_len(&self, axis: usize, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding[axis];
        let k = self.kernel[axis];
        let s = self.stride[axis];
        if s == 0 || k == 0 || padded < k {
            return None;
        }
        Some((padded - k) / s + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Input or parameter; created through [`Graph::leaf`].
    Leaf,
    /// Elementwise sum of two equal-shape tensors.
    Add,
    /// Elementwise product of two equal-shape tensors.
    Mul,
    /// `x * s` where `s` is a single scalar or one factor per leading-axis slice.
    Scale,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// `[ci, h, w]` with weight `[co, ci, kh, kw]` and optional bias `[co]`.
    Conv2d(Window2d),
    /// `[c, h, w]` with weight `[c, kh, kw]` and optional bias `[c]`.
    DepthwiseConv2d(Window2d),
    /// `[ci, h, w]` with weight `[co, ci]` and optional bias `[co]`.
    PointwiseConv2d,
    MaxPool2d(Window2d),
    /// `[c, h, w] -> [c]`.
    GlobalAvgPool,
    Relu,
    Sigmoid,
    SoftmaxLastAxis,
    /// `[in]` or `[n, in]` with weight `[out, in]` and optional bias `[out]`.
    Linear,
    Concat {
        axis: usize,
    },
    Reshape(Vec<usize>),
    /// Contiguous range of the leading axis.
    SliceChannels {
        start: usize,
        len: usize,
    },
    /// `[c, h, w]` with per-channel `gamma` and `beta`.
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    /// Query `[cq, h, w]`, key `[cq, h, w]` -> energies `[h, w, h + w - 1]`.
    ///
    /// For position `(i, j)` the last axis lists the column `(0..h, j)` first,
    /// then the row `(i, 0..w)` with `(i, j)` itself skipped.
    CrissCrossAffinity,
    /// Weights `[h, w, h + w - 1]`, value `[cv, h, w]` -> `[cv, h, w]`.
    CrissCrossAggregate,
    /// Sum of all entries into shape `[1]`.
    Sum,
    /// Binary cross-entropy of a single logit against a fixed target in `[0, 1]`.
    BceWithLogits {
        target: f64,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::DepthwiseConv2d(_) => "depthwise-conv2d",
            OpKind::PointwiseConv2d => "pointwise-conv2d",
            OpKind::MaxPool2d(_) => "maxpool2d",
            OpKind::GlobalAvgPool => "global-avg-pool",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxLastAxis => "softmax-last-axis",
            OpKind::Linear => "linear",
            OpKind::Concat { .. } => "concat",
            OpKind::Reshape(_) => "reshape",
            OpKind::SliceChannels { .. } => "slice-channels",
            OpKind::GroupNorm { .. } => "group-norm",
            OpKind::CrissCrossAffinity => "criss-cross-affinity",
            OpKind::CrissCrossAggregate => "criss-cross-aggregate",
            OpKind::Sum => "sum",
            OpKind::BceWithLogits { .. } => "bce-with-logits",
        }
    }
}

/// Values saved by the forward pass for use in backward.
#[derive(Debug, Clone)]
pub(crate) enum Saved<T> {
    None,
    /// Flat input index of the maximum for every pooled output.
    Argmax(Vec<usize>),
    /// Per-group mean and reciprocal standard deviation.
    Moments {
        mean: Vec<T>,
        rstd: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    kind: OpKind,
    parents: Vec<usize>,
    saved: Saved<T>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.set_grad(None);
        self.push(value, OpKind::Leaf, Vec::new(), Saved::None)
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn kind(&self, v: Var) -> &OpKind {
        &self.nodes[v.0].kind
    }

    pub fn parents(&self, v: Var) -> impl Iterator<Item = Var> + '_ {
        self.nodes[v.0].parents.iter().map(|&p| Var(p))
    }

    fn push(&mut self, value: Tensor<T>, kind: OpKind, parents: Vec<usize>, saved: Saved<T>) -> Var {
        debug_assert!(parents.iter().all(|&p| p < self.nodes.len()));
        self.nodes.push(Node {
            value,
            kind,
            parents,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluate one operation and append it to the tape.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(v) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::UnknownVar(v.0));
        }
        if kind == OpKind::Leaf {
            return Err(Error::Attr {
                op: "leaf",
                reason: "leaves are created with Graph::leaf".into(),
            });
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = kernels::forward(&kind, &values)?;
        let parents = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, kind, parents, saved))
    }

    /// Populate gradients of `root` with respect to every node it depends on.
    ///
    /// Gradients from any earlier call are discarded first. Nodes that `root`
    /// does not depend on are left without a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::UnknownVar(root.0));
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.parents.is_empty() {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let contributions = kernels::backward(&node.kind, &inputs, &node.value, &node.saved, &gout);
                for (&p, contribution) in node.parents.iter().zip(contributions) {
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.value.set_grad(grad);
        }
        Ok(())
    }

    /// Hash of every piecewise choice made by the forward pass: which relu
    /// inputs are positive and which entry won each max-pool window. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match (&node.kind, &node.saved) {
                (OpKind::Relu, _) | (OpKind::BceWithLogits { .. }, _) => {
                    let x = &self.nodes[node.parents[0]].value;
                    for v in x.data() {
                        mix((*v > T::zero()) as u64);
                    }
                }
                (OpKind::MaxPool2d(_), Saved::Argmax(idx)) => idx.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(OpKind::Scale, &[x, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window2d) -> Result<Var> {
        self.apply(OpKind::Conv2d(win), &with_bias(x, w, b))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window2d) -> Result<Var> {
        self.apply(OpKind::DepthwiseConv2d(win), &with_bias(x, w, b))
    }

    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.apply(OpKind::PointwiseConv2d, &with_bias(x, w, b))
    }

    pub fn max_pool2d(&mut self, x: Var, win: Window2d) -> Result<Var> {
        self.apply(OpKind::MaxPool2d(win), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxLastAxis, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.apply(OpKind::Linear, &with_bias(x, w, b))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.into()), &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceChannels { start, len }, &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.apply(OpKind::GroupNorm { groups, eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn criss_cross_affinity(&mut self, q: Var, k: Var) -> Result<Var> {
        self.apply(OpKind::CrissCrossAffinity, &[q, k])
    }

    pub fn criss_cross_aggregate(&mut self, attn: Var, v: Var) -> Result<Var> {
        self.apply(OpKind::CrissCrossAggregate, &[attn, v])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        self.apply(OpKind::BceWithLogits { target }, &[logit])
    }
}

fn with_bias(x: Var, w: Var, b: Option<Var>) -> Vec<Var> {
    let mut v = vec![x, w];
    v.extend(b);
    v
}

#[cfg(test)]
mod tests;
