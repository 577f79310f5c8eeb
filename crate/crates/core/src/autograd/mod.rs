//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every executed operation in order. Leaves are tensors
//! supplied by the caller (inputs or bound parameters); every other node holds
//! the saved state its backward rule needs. [`Graph::backward`] walks the tape
//! once in reverse and accumulates gradients into leaves that require them.

mod conv;
mod elementwise;
mod norm;

pub use conv::{conv3d_output_extent, Conv3dSpec};
pub(crate) use elementwise::js_slice;
pub use norm::{BatchNormMode, RunningStats, BN_EPSILON, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv3d(Conv3dSpec),
    BatchNorm(norm::BnSaved<T>),
    Relu,
    Add,
    ScalarMul(T),
    Sum,
    GlobalAvgPool,
    MaxPool3d { argmax: Vec<usize> },
    Linear,
    Softmax { group: usize },
    LogSoftmax { group: usize },
    Nll { labels: Vec<usize> },
    Dsnt { grid_x: Vec<T>, grid_y: Vec<T> },
    JsToTarget { target: Vec<T>, group: usize },
    EuclidToTarget { target: Vec<T> },
    MaskedMean { mask: Vec<bool> },
    DotConst { weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its gradient accumulator is active iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, Vec::new(), requires_grad)
    }

    /// Adds a trainable leaf copied from a named parameter.
    pub fn bind_param(&mut self, name: &str, param: &Tensor<T>) -> Var {
        let mut t = Tensor::from_vec(param.shape(), param.data().to_vec()).expect("valid param");
        t.set_requires_grad(true);
        let v = self.leaf(t);
        self.bindings.push((name.to_string(), v));
        v
    }

    /// Named parameter leaves bound into this graph, in binding order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        if !matches!(op, Op::Leaf) {
            value.set_requires_grad(false);
        }
        self.nodes.push(Node { value, op, inputs, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, inputs, requires_grad)
    }

    /// Back-propagates from a scalar node, adding `∂loss/∂leaf` into every
    /// reachable leaf that requires grad. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue_leaf(&mut self.nodes[idx], &g);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = backward_rule(&node.op, &inputs, &node.value, &g, &needs);
            let input_ids = node.inputs.clone();
            for (var, ig) in input_ids.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}

fn continue_leaf<T: Scalar>(node: &mut Node<T>, g: &[T]) {
    node.value.accumulate_grad(g);
}

fn backward_rule<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv3d(spec) => conv::backward(spec, inputs, g, needs),
        Op::BatchNorm(saved) => norm::backward(saved, inputs, g, needs),
        _ => elementwise::backward(op, inputs, output, g, needs),
    }
}

pub(crate) fn check_rank<T: Scalar>(
    op: &'static str,
    t: &Tensor<T>,
    rank: usize,
) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}
