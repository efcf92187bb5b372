//! Explicit, per-forward-pass reverse-mode autodiff.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! enough saved state to run its backward rule. [`Var`] is a cheap `Copy`
//! handle into a tape. [`Tape::backward`] walks the nodes once, in reverse
//! creation order, and may run only once per recording.

pub mod gradcheck;
pub mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use kernels::{MapDims, MapLayout};
pub(crate) use ops::sigmoid;

pub type NodeId = usize;

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: ops::Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    flops: Cell<u64>,
    events: RefCell<BTreeMap<&'static str, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Number of nodes whose backward rule ran (or leaves that received a
    /// gradient). Each node is visited at most once.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all recorded nodes so the tape can record a fresh pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
        self.flops.set(0);
        self.events.borrow_mut().clear();
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Rc::new(value), ops::Op::Leaf, requires_grad)
    }

    /// Approximate forward floating-point operations recorded so far
    /// (2 per multiply-accumulate in matmul/conv; 1 per element otherwise).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Increments a named instrumentation counter.
    pub fn record_event(&self, name: &'static str) {
        *self.events.borrow_mut().entry(name).or_insert(0) += 1;
    }

    pub fn event_count(&self, name: &str) -> usize {
        self.events.borrow().get(name).copied().unwrap_or(0)
    }

    pub fn events(&self) -> BTreeMap<&'static str, usize> {
        self.events.borrow().clone()
    }

    pub(crate) fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    pub(crate) fn push_node(&self, value: Rc<Tensor>, op: ops::Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a one-element loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            let node = &nodes[id];
            if node.requires_grad {
                ops::backward(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Returns the single element of a one-element node.
    pub fn item(&self) -> Result<Scalar> {
        self.value().item()
    }

    /// New leaf with the same value and no gradient path to `self`.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.push_node(v, ops::Op::Leaf, false)
    }

    /// Right-aligned broadcasting for a binary op.
    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        ops::binary(self, other, ops::BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        ops::binary(self, other, ops::BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        ops::binary(self, other, ops::BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        ops::binary(self, other, ops::BinaryKind::Div)
    }

    pub fn scale(self, factor: Scalar) -> Result<Var<'t>> {
        ops::scale(self, factor)
    }

    pub fn add_scalar(self, value: Scalar) -> Result<Var<'t>> {
        ops::add_scalar(self, value)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        ops::unary(self, ops::UnaryKind::Neg)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        ops::unary(self, ops::UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        ops::unary(self, ops::UnaryKind::Sigmoid)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        ops::unary(self, ops::UnaryKind::Abs)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        ops::unary(self, ops::UnaryKind::Sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        ops::unary(self, ops::UnaryKind::Exp)
    }

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        ops::matmul(self, other)
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'t>> {
        ops::transpose(self)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        ops::reshape(self, shape.into())
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        ops::narrow(self, axis, start, len)
    }

    pub fn index_select(self, axis: usize, index: &[usize]) -> Result<Var<'t>> {
        ops::index_select(self, axis, index.to_vec())
    }

    /// `out[index[i]] += self[i]` along axis 0 into `rows` rows.
    pub fn scatter_add_rows(self, index: &[usize], rows: usize) -> Result<Var<'t>> {
        ops::scatter_add_rows(self, index.to_vec(), rows)
    }

    /// Sum over `axis`, removing it (a 1-D input becomes shape `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        ops::sum_axis(self, axis)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("mean over missing axis {axis}")))?;
        self.sum_axis(axis)?.scale(1.0 / n as Scalar)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        ops::sum_all(self)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as Scalar)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        ops::softmax(self, axis)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        ops::log_softmax(self)
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    ops::concat(inputs, axis)
}

/// Layer normalization over the last axis with epsilon `1e-5`.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    ops::layer_norm(x, gain, bias)
}

/// `x · w + b` where `x: [.., in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let shape = x.shape();
    let in_dim = *shape.last().expect("tensors have at least one axis");
    let rows = shape.iter().product::<usize>() / in_dim;
    let out = x.reshape(vec![rows, in_dim])?.matmul(weight)?;
    let out = match bias {
        Some(b) => out.add(b)?,
        None => out,
    };
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out.shape()[1];
    out.reshape(out_shape)
}

/// Cross-correlation of `x: [C_in,H,W]` or `[N,C_in,H,W]` with
/// `kernels: [C_out,C_in,kh,kw]`.
pub fn conv2d<'t>(x: Var<'t>, kernels: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
    ops::conv2d(x, kernels, stride, padding)
}

/// Max pooling over `[C,H,W]` or `[N,C,H,W]`.
pub fn max_pool2d(x: Var<'_>, kernel: usize, stride: usize, padding: usize) -> Result<Var<'_>> {
    ops::max_pool2d(x, kernel, stride, padding)
}

/// Samples `map: [C,H,W]` at normalized `points: [P,2]` given as `(u, v)`,
/// returning `[P,C]`.
///
/// Align-corners-false convention: `u = (col + 0.5) / W` is the centre of
/// column `col`. Points outside `[0,1]²` sample zero; corners that fall off
/// the map contribute zero.
pub fn bilinear_sample<'t>(map: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    ops::bilinear(map, points, MapLayout::ChannelFirst)
}

/// Same as [`bilinear_sample`] for a channel-last map `[H,W,C]`.
pub fn bilinear_sample_hwc<'t>(map: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    ops::bilinear(map, points, MapLayout::ChannelLast)
}

/// Multi-level deformable sampling.
///
/// `value: [Σ h·w, heads·head_dim]` stacks channel-last maps of the given
/// `(h, w)` levels; `points: [M, heads, levels, K, 2]` are normalized `(u, v)`
/// locations and `weights: [M, heads, levels, K]` their attention weights.
/// Head `h` reads channel block `h` of the value map. Returns `[M, D]`.
pub fn deform_sample<'t>(value: Var<'t>, levels: &[(usize, usize)], points: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    ops::deform_sample(value, levels, points, weights)
}
