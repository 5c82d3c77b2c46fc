//! Minimal reverse-mode automatic differentiation on `f32` tensors.
//!
//! A [`Tape`] records each forward operation as a node; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every node,
//! including leaves. All compute is single-threaded and allocation order is
//! fixed, so identical inputs produce bit-identical outputs and gradients —
//! the property the trainer's determinism contract rests on.
//!
//! Reductions (means, losses) accumulate in `f64` before rounding back to
//! `f32`, which keeps finite-difference checks meaningful at `1e-2` relative
//! tolerance.

mod conv;
#[cfg(test)]
mod grad_tests;
mod ops;

pub mod finite_diff;

pub use conv::{col2im, im2col};

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Dynamic-shape `f32` tensor.
pub type Arr = ArrayD<f32>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    MatMul(Var, Var),
    AddBiasRows(Var, Var),
    AddBiasChannels(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        frozen_w: bool,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        frozen_w: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    UpsampleBilinear(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Arr,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f32>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f32>,
    },
    RowsByIndex {
        m: Var,
        idx: Vec<usize>,
    },
    RowDot(Var, Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        softmax: Arr,
    },
}

pub(crate) struct Node {
    pub value: Arr,
    pub op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    pub(crate) g: Vec<Option<Arr>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`. Zero-filled if the node
    /// did not influence the loss.
    pub fn get(&self, v: Var, tape: &Tape) -> Arr {
        match &self.g[v.0] {
            Some(a) => a.clone(),
            None => Arr::zeros(tape.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Arr> {
        self.g[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Introduces an input tensor to the graph.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Extracts a scalar node's value.
    pub fn scalar(&self, v: Var) -> f32 {
        *self.nodes[v.0]
            .value
            .first()
            .expect("scalar() on empty tensor")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            let grad_out = match g[id].take() {
                Some(go) => go,
                None => continue,
            };
            self.backprop_node(id, &grad_out, &mut g);
            g[id] = Some(grad_out);
        }
        Ok(Grads { g })
    }
}

pub(crate) fn acc(slot: &mut Option<Arr>, delta: Arr) {
    match slot {
        Some(a) => *a += &delta,
        None => *slot = Some(delta),
    }
}

/// Scalar tensor constructor (rank-0).
pub fn scalar_arr(v: f32) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}
