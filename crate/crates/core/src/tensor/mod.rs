//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations on
//! tensors that require gradients record their parents and a backward rule;
//! operations on constants record nothing. Calling [`Tensor::backward`] on a
//! scalar walks the recorded graph and returns a [`Gradients`] map holding
//! the gradient of every reachable leaf parameter.
//!
//! Broadcasting is deliberately narrow: a rank-1 row vector can be added
//! across leading dimensions ([`Tensor::add_row`]) and a matrix can be shared
//! as the right-hand side of a batched product. Everything else needs an
//! explicit [`Tensor::expand`].

mod backward;
mod kernels;
mod ops;

pub use kernels::{count_macs, mac_count, reset_mac_count};

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{contract, Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule and saved state for a recorded operation.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Affine(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sigmoid(Tensor),
    Gelu(Tensor),
    Matmul { a: Tensor, b: Tensor },
    Permute(Tensor, Vec<usize>),
    Reshape(Tensor),
    Slice { src: Tensor, axis: usize, start: usize },
    Concat { parts: Vec<Tensor>, axis: usize },
    SumAxis { src: Tensor, axis: usize },
    SumAll(Tensor),
    Expand { src: Tensor, axis: usize },
    Softmax { src: Tensor, axis: usize },
    LogSoftmax { src: Tensor, axis: usize },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Tensor, ids: Vec<usize> },
    StraightThrough(Tensor),
    GateResidual { h: Tensor, out: Tensor, gate: Tensor },
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Matmul { a, b } => vec![a, b],
            Op::Affine(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::StraightThrough(a) => vec![a],
            Op::Slice { src, .. }
            | Op::SumAxis { src, .. }
            | Op::Expand { src, .. }
            | Op::Softmax { src, .. }
            | Op::LogSoftmax { src, .. } => vec![src],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Gather { table, .. } => vec![table],
            Op::GateResidual { h, out, gate } => vec![h, out, gate],
        }
    }
}

pub(crate) struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Option<Op>,
}

/// An immutable n-dimensional array of f64 values, optionally part of an
/// autodiff graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    contract!(
        expected == len,
        "shape {shape:?} holds {expected} elements but {len} were given"
    );
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Node { id: next_id(), shape, data, requires_grad, op: None }))
    }

    /// Builds the result of an operation, keeping the backward record only
    /// when some parent participates in differentiation.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { Some(op) } else { None };
        Tensor(Arc::new(Node { id: next_id(), shape, data, requires_grad, op }))
    }

    /// A constant tensor that never receives gradient.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Copy of this tensor cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// A leaf of the same shape and trainability holding new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        check_len(&self.0.shape, data.len())?;
        Ok(Tensor::leaf(self.0.shape.clone(), data, self.0.requires_grad))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        contract!(self.numel() == 1, "item() on tensor of shape {:?}", self.shape());
        Ok(self.0.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Gradients of this scalar with respect to every reachable trainable leaf.
    pub fn backward(&self) -> Result<Gradients> {
        let mut grads = Gradients::default();
        self.backward_into(&mut grads)?;
        Ok(grads)
    }

    /// Like [`Tensor::backward`], accumulating into an existing map.
    pub fn backward_into(&self, grads: &mut Gradients) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order = topo_order(self);
        // Ids grow with creation, so ascending id is a topological order that
        // does not depend on graph traversal details.
        order.sort_by_key(Tensor::id);
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else { continue };
            match &node.0.op {
                None => grads.accumulate(node.id(), &grad),
                Some(op) => {
                    let parents = op.parents();
                    let contributions = backward::backward(op, &node.0, &grad);
                    for (parent, contribution) in parents.into_iter().zip(contributions) {
                        let Some(c) = contribution else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v),
                            None => {
                                pending.insert(parent.id(), c);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order of the differentiable subgraph rooted at `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for p in op.parents().into_iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradient map keyed by leaf tensor identity.
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    map: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    fn accumulate(&mut self, id: usize, grad: &[f64]) {
        match self.map.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, v)| *a += v),
            None => {
                self.map.insert(id, grad.to_vec());
            }
        }
    }

    /// Gradient for `t`, if any reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient for `t`, zeros when nothing reached it.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
