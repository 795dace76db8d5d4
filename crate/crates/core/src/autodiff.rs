//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents; parents therefore always precede their children and the
//! tape is its own topological order. [`Tape::backward`] walks the tape in
//! reverse, accumulating adjoints in a fixed order, so two calls on the same
//! tape produce bitwise-identical gradients.
//!
//! [`Tape::detach`] is the stop-gradient primitive: it records a copy of a
//! value as a fresh parentless node, so the forward computation is unchanged
//! while no adjoint can flow back into the source.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{broadcast_plan, sigmoid, BinaryOp, Broadcast, ReduceOp, Tensor, UnaryOp};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on one particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detach,
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    MatMul(usize, usize),
    Reduce(ReduceOp, usize, Option<usize>),
    Reshape(usize),
    Gather(usize, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Leaf explicitly marked as a gradient target.
    requires_grad: bool,
    /// Some requires_grad leaf is reachable through the parents.
    tracked: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::Tape(format!(
                "node {} belongs to tape {}, not tape {}",
                id.index, id.tape, self.id
            )));
        }
        if id.index >= self.nodes.len() {
            return Err(Error::Tape(format!("node {} does not exist", id.index)));
        }
        Ok(id.index)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let tracked = requires_grad
            || match &op {
                Op::Leaf | Op::Detach => false,
                Op::Unary(_, a) | Op::Reduce(_, a, _) | Op::Reshape(a) | Op::Gather(a, _) => {
                    self.nodes[*a].tracked
                }
                Op::Binary(_, a, b) | Op::MatMul(a, b) => {
                    self.nodes[*a].tracked || self.nodes[*b].tracked
                }
            };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            tracked,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input. Only leaves created with `requires_grad` receive
    /// entries in the [`GradMap`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Same value as `x`, no parents: gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.clone();
        Ok(self.push(Op::Detach, value, false))
    }

    pub fn value(&self, x: NodeId) -> Result<&Tensor> {
        let i = self.check(x)?;
        Ok(&self.nodes[i].value)
    }

    /// Value of a one-element node.
    pub fn item(&self, x: NodeId) -> Result<f64> {
        self.value(x)?.item()
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.unary(op)?;
        Ok(self.push(Op::Unary(op, i), value, false))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[i].value.binary(op, &self.nodes[j].value)?;
        Ok(self.push(Op::Binary(op, i, j), value, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Softplus, a)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[i].value.matmul(&self.nodes[j].value)?;
        Ok(self.push(Op::MatMul(i, j), value, false))
    }

    pub fn reduce(&mut self, op: ReduceOp, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.reduce(op, axis)?;
        Ok(self.push(Op::Reduce(op, i, axis), value, false))
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    /// Sums over the last axis (a scalar for vectors, one value per row for
    /// matrices).
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.value(a)?.rank();
        if rank == 0 {
            return Ok(a);
        }
        self.sum(a, Some(rank - 1))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.reshape(shape)?;
        Ok(self.push(Op::Reshape(i), value, false))
    }

    /// Selects (possibly repeated) slices along the leading axis.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let i = self.check(a)?;
        let value = self.nodes[i].value.gather(indices)?;
        Ok(self.push(Op::Gather(i, indices.to_vec()), value, false))
    }

    /// `log(sum(exp(a)))` along `axis`, shifted by the (constant) maximum.
    pub fn logsumexp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shift = self.value(a)?.max_along(axis)?;
        if !shift.is_finite() {
            return Err(Error::numeric("log-sum-exp over a slice with no finite entry"));
        }
        let shift = self.constant(shift);
        // Re-insert the reduced axis so the shift broadcasts back over `a`.
        let shape = self.value(a)?.shape().to_vec();
        let shifted = if axis == 0 {
            self.sub(a, shift)?
        } else {
            // Only leading-axis reductions broadcast under the suffix rule;
            // other axes go through an explicit gather of the shift.
            let (outer, extent, inner) = self.value(a)?.axis_split(axis)?;
            let flat = self.reshape(shift, &[outer * inner])?;
            let idx: Vec<usize> = (0..outer)
                .flat_map(|o| (0..extent).flat_map(move |_| (0..inner).map(move |j| o * inner + j)))
                .collect();
            let tiled = self.gather(flat, &idx)?;
            let tiled = self.reshape(tiled, &shape)?;
            self.sub(a, tiled)?
        };
        let e = self.exp(shifted)?;
        let s = self.sum(e, Some(axis))?;
        let l = self.log(s)?;
        self.add(l, shift)
    }

    /// Reverse-mode gradient of the one-element node `loss` with respect to
    /// every `requires_grad` leaf. The tape is left untouched.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let root = self.check(loss)?;
        let root_value = &self.nodes[root].value;
        if root_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adjoints[root] = Some(vec![1.0]);
        let mut grads = BTreeMap::new();

        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        grads.insert(idx, Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::Detach => {}
                Op::Unary(op, a) => {
                    let x = self.nodes[*a].value.data();
                    let y = node.value.data();
                    let contrib: Vec<f64> = match op {
                        UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        UnaryOp::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        UnaryOp::Neg => g.iter().map(|g| -g).collect(),
                        UnaryOp::Softplus => {
                            g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect()
                        }
                    };
                    self.accumulate(&mut adjoints, *a, contrib);
                }
                Op::Binary(op, a, b) => self.binary_backward(&mut adjoints, *op, *a, *b, &g)?,
                Op::MatMul(a, b) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?;
                    if self.nodes[*a].tracked {
                        let bt = self.nodes[*b].value.transpose()?;
                        self.accumulate(&mut adjoints, *a, gt.matmul(&bt)?.into_data());
                    }
                    if self.nodes[*b].tracked {
                        let at = self.nodes[*a].value.transpose()?;
                        self.accumulate(&mut adjoints, *b, at.matmul(&gt)?.into_data());
                    }
                }
                Op::Reduce(op, a, axis) => {
                    let src = &self.nodes[*a].value;
                    let mut contrib = vec![0.0; src.len()];
                    match axis {
                        None => {
                            let scale = match op {
                                ReduceOp::Sum => g[0],
                                ReduceOp::Mean => g[0] / src.len() as f64,
                            };
                            contrib.iter_mut().for_each(|c| *c = scale);
                        }
                        Some(axis) => {
                            let (outer, extent, inner) = src.axis_split(*axis)?;
                            let div = match op {
                                ReduceOp::Sum => 1.0,
                                ReduceOp::Mean => extent as f64,
                            };
                            for o in 0..outer {
                                for e in 0..extent {
                                    for j in 0..inner {
                                        contrib[(o * extent + e) * inner + j] =
                                            g[o * inner + j] / div;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut adjoints, *a, contrib);
                }
                Op::Reshape(a) => self.accumulate(&mut adjoints, *a, g),
                Op::Gather(a, indices) => {
                    let src = &self.nodes[*a].value;
                    let width = src.shape()[1..].iter().product::<usize>();
                    let mut contrib = vec![0.0; src.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..width {
                            contrib[i * width + j] += g[r * width + j];
                        }
                    }
                    self.accumulate(&mut adjoints, *a, contrib);
                }
            }
        }
        Ok(GradMap {
            tape: self.id,
            grads,
        })
    }

    fn binary_backward(
        &self,
        adjoints: &mut [Option<Vec<f64>>],
        op: BinaryOp,
        a: usize,
        b: usize,
        g: &[f64],
    ) -> Result<()> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (plan, _) = broadcast_plan(va.shape(), vb.shape())?;
        let (xa, xb) = (va.data(), vb.data());
        let (la, lb) = (xa.len().max(1), xb.len().max(1));
        let at = |i: usize| match plan {
            Broadcast::Left => i % la,
            _ => i,
        };
        let bt = |i: usize| match plan {
            Broadcast::Right => i % lb,
            _ => i,
        };
        if self.nodes[a].tracked {
            let mut contrib = vec![0.0; xa.len()];
            for (i, gi) in g.iter().enumerate() {
                let d = match op {
                    BinaryOp::Add | BinaryOp::Sub => *gi,
                    BinaryOp::Mul => gi * xb[bt(i)],
                    BinaryOp::Div => gi / xb[bt(i)],
                };
                contrib[at(i)] += d;
            }
            self.accumulate(adjoints, a, contrib);
        }
        if self.nodes[b].tracked {
            let mut contrib = vec![0.0; xb.len()];
            for (i, gi) in g.iter().enumerate() {
                let d = match op {
                    BinaryOp::Add => *gi,
                    BinaryOp::Sub => -gi,
                    BinaryOp::Mul => gi * xa[at(i)],
                    BinaryOp::Div => {
                        let y = xb[bt(i)];
                        -gi * xa[at(i)] / (y * y)
                    }
                };
                contrib[bt(i)] += d;
            }
            self.accumulate(adjoints, b, contrib);
        }
        Ok(())
    }

    fn accumulate(&self, adjoints: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>) {
        if !self.nodes[target].tracked {
            return;
        }
        match &mut adjoints[target] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Adjoints of the `requires_grad` leaves of one tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    tape: u64,
    grads: BTreeMap<usize, Tensor>,
}

impl GradMap {
    /// Adjoint of `id`, or `None` if `id` is not a gradient-tracked leaf
    /// (or belongs to another tape). A tracked leaf that the loss does not
    /// depend on is reported as zeros by [`GradMap::get_or_zeros`].
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(&id.index)
    }

    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Result<Tensor> {
        match self.get(id) {
            Some(g) => Ok(g.clone()),
            None => Ok(Tensor::zeros(tape.value(id)?.shape())),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`, one
/// coordinate at a time. Used as the test oracle for [`Tape::backward`].
pub fn finite_difference<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut out = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "finite-difference oracle hit a non-finite value at coordinate {i}"
            )));
        }
        *o = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}
