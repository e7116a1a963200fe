//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! The tape executes eagerly: each operation computes its output tensor
//! immediately and appends a node recording what backward needs. Node
//! inputs always reference earlier nodes, so the tape is topological by
//! construction and `backward` is a single reverse sweep.

mod check;

pub use check::finite_diff_check;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, BnMode, BnSaved, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    ReduceMean {
        input: usize,
        axes: Vec<usize>,
    },
    ReduceMax {
        input: usize,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved,
        epsilon: f32,
    },
    Activation {
        input: usize,
        kind: Activation,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
    BroadcastMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape {
        input: usize,
    },
    /// Scalar pick at a flat index (used to select one logit).
    Select {
        input: usize,
        index: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct GradientStore {
    grads: HashMap<usize, Tensor>,
}

impl GradientStore {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of eagerly executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node { op, value, trainable });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Var> {
        let params = tensor::ConvParams::new(
            self.value(weight).clone(),
            bias.map(|b| self.value(b).clone()),
            stride,
            padding,
        )?;
        let out = tensor::conv3d(self.value(input), &params)?;
        Ok(self.push(
            Op::Conv3d { input: input.0, weight: weight.0, bias: bias.map(|b| b.0), stride, padding },
            out,
            false,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = tensor::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(Op::Linear { input: input.0, weight: weight.0, bias: bias.0 }, out, false))
    }

    pub fn reduce_mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let out = tensor::reduce_mean(self.value(input), axes)?;
        Ok(self.push(Op::ReduceMean { input: input.0, axes: axes.to_vec() }, out, false))
    }

    pub fn reduce_max(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let (out, argmax) = tensor::reduce_max_with_arg(self.value(input), axes)?;
        Ok(self.push(Op::ReduceMax { input: input.0, axes: axes.to_vec(), argmax }, out, false))
    }

    /// Batch normalization. Train mode updates the running statistics in
    /// place through the supplied mutable references.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        epsilon: f32,
        momentum: f32,
        mode: BnMode,
    ) -> Result<Var> {
        let mut params = tensor::BatchNormParams {
            gamma: self.value(gamma).clone(),
            beta: self.value(beta).clone(),
            running_mean: running_mean.clone(),
            running_var: running_var.clone(),
            epsilon,
            momentum,
        };
        let (out, saved) = tensor::batch_norm(self.value(input), &mut params, mode)?;
        *running_mean = params.running_mean;
        *running_var = params.running_var;
        Ok(self.push(
            Op::BatchNorm { input: input.0, gamma: gamma.0, beta: beta.0, saved, epsilon },
            out,
            false,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = tensor::activation(self.value(input), kind);
        self.push(Op::Activation { input: input.0, kind }, out, false)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Scalar mean cross-entropy loss; the probability rows are retrievable
    /// through [`Tape::probs`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            false,
        ))
    }

    /// Probability rows saved by a `softmax_cross_entropy` node.
    pub fn probs(&self, loss: Var) -> Option<&Tensor> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::BroadcastMul { a: a.0, b: b.0 }, out, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out, false))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = tensor::concat(&tensors, axis)?;
        Ok(self.push(Op::Concat { inputs: inputs.iter().map(|v| v.0).collect(), axis }, out, false))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(Op::Reshape { input: input.0 }, out, false))
    }

    /// Pick one element (by flat index) as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let t = self.value(input);
        if index >= t.len() {
            return Err(Error::InvalidArgument(format!(
                "select index {index} out of range for {} elements",
                t.len()
            )));
        }
        let out = Tensor::scalar(t.data()[index]);
        Ok(self.push(Op::Select { input: input.0, index }, out, false))
    }

    /// Mean over every axis, yielding a scalar.
    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let rank = self.value(input).rank();
        let axes: Vec<usize> = (0..rank).collect();
        let m = self.reduce_mean(input, &axes)?;
        self.reshape(m, &[1])
    }

    /// Gradients of the scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<GradientStore> {
        self.backward_keeping(root, &[])
    }

    /// As [`Tape::backward`], additionally retaining gradients for the
    /// listed non-parameter nodes (used by saliency).
    pub fn backward_keeping(&self, root: Var, keep: &[Var]) -> Result<GradientStore> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let keep: std::collections::HashSet<usize> = keep.iter().map(|v| v.0).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| {
            match slot {
                Some(existing) => {
                    let sum = tensor::add(existing, &g).expect("gradient shapes agree");
                    *existing = sum;
                }
                None => *slot = Some(g),
            }
        };

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if keep.contains(&id) {
                // retained intermediates keep their accumulated gradient
                // even though it is consumed for propagation below
                grads[id] = Some(g.clone());
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv3d { input, weight, bias, stride, padding } => {
                    let w = &self.nodes[*weight].value;
                    let x = &self.nodes[*input].value;
                    let dx = tensor::conv3d_grad_input(&g, w, *stride, *padding, x.shape())?;
                    accumulate(&mut grads[*input], dx);
                    let ws = w.shape();
                    let dw = tensor::conv3d_grad_weight(x, &g, *stride, *padding, (ws[2], ws[3], ws[4]))?;
                    accumulate(&mut grads[*weight], dw);
                    if let Some(b) = bias {
                        accumulate(&mut grads[*b], tensor::conv3d_grad_bias(&g)?);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = tensor::linear_backward(
                        &g,
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                    );
                    accumulate(&mut grads[*input], dx);
                    accumulate(&mut grads[*weight], dw);
                    accumulate(&mut grads[*bias], db);
                }
                Op::ReduceMean { input, axes } => {
                    let dx = tensor::reduce_backward(
                        &g,
                        self.nodes[*input].value.shape(),
                        axes,
                        tensor::Reduction::Mean,
                        None,
                    )?;
                    accumulate(&mut grads[*input], dx);
                }
                Op::ReduceMax { input, axes, argmax } => {
                    let dx = tensor::reduce_backward(
                        &g,
                        self.nodes[*input].value.shape(),
                        axes,
                        tensor::Reduction::Max,
                        Some(argmax),
                    )?;
                    accumulate(&mut grads[*input], dx);
                }
                Op::BatchNorm { input, gamma, beta, saved, epsilon } => {
                    let (dx, dgamma, dbeta) = tensor::batch_norm_backward(
                        &g,
                        &self.nodes[*input].value,
                        &self.nodes[*gamma].value,
                        saved,
                        *epsilon,
                    );
                    accumulate(&mut grads[*input], dx);
                    accumulate(&mut grads[*gamma], dgamma);
                    accumulate(&mut grads[*beta], dbeta);
                }
                Op::Activation { input, kind } => {
                    let dx = tensor::activation_backward(
                        &g,
                        &self.nodes[*input].value,
                        &node.value,
                        *kind,
                    );
                    accumulate(&mut grads[*input], dx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let dl = tensor::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    accumulate(&mut grads[*logits], dl);
                }
                Op::BroadcastMul { a, b } => {
                    let (da, db) = tensor::broadcast_mul_backward(
                        &g,
                        &self.nodes[*a].value,
                        &self.nodes[*b].value,
                    );
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::Concat { inputs, axis } => {
                    let mut start = 0usize;
                    for &inp in inputs {
                        let e = self.nodes[inp].value.shape()[*axis];
                        let piece = tensor::slice_axis(&g, *axis, start, e)?;
                        accumulate(&mut grads[inp], piece);
                        start += e;
                    }
                }
                Op::Reshape { input } => {
                    let dx = g.reshape(self.nodes[*input].value.shape())?;
                    accumulate(&mut grads[*input], dx);
                }
                Op::Select { input, index } => {
                    let mut dx = Tensor::zeros(self.nodes[*input].value.shape());
                    dx.data_mut()[*index] = g.data()[0];
                    accumulate(&mut grads[*input], dx);
                }
            }
        }

        let mut store = GradientStore::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable || keep.contains(&id) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                store.grads.insert(id, g);
            }
        }
        Ok(store)
    }
}
