//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built by running forward operators through it; every
//! node keeps its output value and enough context for its vector-Jacobian
//! product. One graph belongs to one forward/backward step.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: (usize, usize),
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_moments: bool,
    },
    Relu(NodeId),
    MaxPool {
        input: NodeId,
        indices: Vec<usize>,
    },
    Concat(NodeId, NodeId),
    Upsample(NodeId),
    Add(NodeId, NodeId),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every node reached during a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's gradient slots. Parameters
    /// not reached by the backward pass are left untouched, so zeroing the
    /// store beforehand yields zero gradients for them.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(id))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let b = bias.map(|b| self.value(b).data().to_vec());
        let y = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            b.as_deref(),
            stride,
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Training-mode batch norm. Returns the batch statistics so the caller
    /// can fold them into running averages.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, ops::BnBatchStats)> {
        let (y, stats) = ops::bn_forward_train(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let inv_std = stats.inv_std(eps);
        let id = self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: stats.mean.clone(),
                inv_std,
                batch_moments: true,
            },
        );
        Ok((id, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<NodeId> {
        let y = ops::bn_forward_eval(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        )?;
        let mean = running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std = running_var
            .iter()
            .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
            .collect();
        Ok(self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_moments: false,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu(input))
    }

    pub fn max_pool(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (y, indices) = ops::max_pool2d_with_indices(self.value(input), kernel, stride)?;
        Ok(self.push(y, Op::MaxPool { input, indices }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn upsample(&mut self, input: NodeId, target_h: usize, target_w: usize) -> Result<NodeId> {
        let y = ops::upsample_nearest(self.value(input), target_h, target_w)?;
        Ok(self.push(y, Op::Upsample(input)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Scalar sum of all entries, as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::full([1, 1, 1, 1], s), Op::Sum(input))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("backward called before forward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::full(self.value(loss).shape(), T::one());
        self.backward_from(vec![(loss, seed)])
    }

    /// Backpropagates externally computed upstream gradients.
    pub fn backward_from(&self, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward called before forward".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("seed node {} not on tape", id.0)));
            }
            if g.shape() != self.value(id).shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for node of shape {:?}", g.shape(), self.value(id).shape()),
                ));
            }
            accumulate(&mut grads, id, g);
        }
        let mut params = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
                continue;
            }
            // leaves keep their gradient; interior ones are dropped once consumed
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let g = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *padding,
                        &dy,
                    )?;
                    accumulate(&mut grads, *input, g.input);
                    accumulate(&mut grads, *weight, g.weight);
                    if let Some(b) = bias {
                        let shape = self.value(*b).shape();
                        accumulate(&mut grads, *b, Tensor::new(shape, g.bias)?);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_moments,
                } => {
                    let g = ops::bn_backward(
                        self.value(*input),
                        self.value(*gamma).data(),
                        mean,
                        inv_std,
                        *batch_moments,
                        &dy,
                    );
                    accumulate(&mut grads, *input, g.input);
                    let gs = self.value(*gamma).shape();
                    accumulate(&mut grads, *gamma, Tensor::new(gs, g.gamma)?);
                    let bs = self.value(*beta).shape();
                    accumulate(&mut grads, *beta, Tensor::new(bs, g.beta)?);
                }
                Op::Relu(input) => {
                    let dx = ops::relu_backward(self.value(*input), &dy);
                    accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool { input, indices } => {
                    let dx = ops::max_pool2d_backward(self.value(*input).shape(), indices, &dy);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Concat(a, b) => {
                    let (da, db) = ops::concat_backward(self.value(*a).c(), &dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Upsample(input) => {
                    let dx = ops::upsample_nearest_backward(self.value(*input).shape(), &dy)?;
                    accumulate(&mut grads, *input, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sum(input) => {
                    let s = dy.data()[0];
                    accumulate(&mut grads, *input, Tensor::full(self.value(*input).shape(), s));
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
