//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles in
//! execution order, so node inputs always precede the node itself. Leaves
//! created with [`Tape::var`] receive gradients; leaves created with
//! [`Tape::constant`] never do, and nothing downstream of constants alone is
//! visited during the backward sweep.
//!
//! Tapes are cheap and meant to be thrown away: build one per loss or per
//! Langevin step, read the gradients, drop it.

use std::cell::RefCell;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, matmul_impl, zip_broadcast, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    BroadcastTo(usize),
    Reshape(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    SumAxis(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    LogSumExp(usize),
    GaussLogDensity(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let rg = self.requires(&[a]);
        self.push(value, op, rg)
    }

    fn try_unary(
        &self,
        a: usize,
        op: Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'_>> {
        let value = f(&self.nodes.borrow()[a].value)?;
        let rg = self.requires(&[a]);
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)?
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar output; returns adjoints for every node
    /// that depends on a differentiable leaf.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        debug_assert!(std::ptr::eq(self, output.tape));
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.id + 1];
        if !out.requires_grad {
            return Ok(Gradients { adj });
        }
        adj[output.id] = Some(Tensor::full(out.value.shape(), 1.0));

        for i in (0..=output.id).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFiniteAdjoint { node: i });
            }
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            let mut out: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            let mut send = |j: usize, grad: Tensor| {
                if nodes[j].requires_grad {
                    out.push((j, grad));
                }
            };
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.sum_to_shape(val(*a).shape())?);
                    send(*b, g.sum_to_shape(val(*b).shape())?);
                }
                Op::Sub(a, b) => {
                    send(*a, g.sum_to_shape(val(*a).shape())?);
                    send(*b, g.scale(-1.0).sum_to_shape(val(*b).shape())?);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, g.mul(val(*b))?.sum_to_shape(val(*a).shape())?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, g.mul(val(*a))?.sum_to_shape(val(*b).shape())?);
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, matmul_impl(&g, false, val(*b), true)?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, matmul_impl(val(*a), true, &g, false)?);
                    }
                }
                Op::BroadcastTo(a) => send(*a, g.sum_to_shape(val(*a).shape())?),
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec())?),
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::SumAxis(a) => send(*a, g.broadcast_to(val(*a).shape())?),
                Op::Relu(a) => {
                    send(*a, zip_broadcast(&g, val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?)
                }
                Op::Tanh(a) => send(*a, zip_broadcast(&g, &node.value, "tanh", |g, y| g * (1.0 - y * y))?),
                Op::Exp(a) => send(*a, g.mul(&node.value)?),
                Op::Log(a) => send(*a, zip_broadcast(&g, val(*a), "log", |g, x| g / x)?),
                Op::Square(a) => send(*a, zip_broadcast(&g, val(*a), "square", |g, x| 2.0 * g * x)?),
                Op::Clamp(a, lo, hi) => send(
                    *a,
                    zip_broadcast(&g, val(*a), "clamp", |g, x| if x < *lo || x > *hi { 0.0 } else { g })?,
                ),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if nodes[p].requires_grad {
                            send(p, g.narrow(*axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let shape = val(*a).shape();
                    let len = node.value.shape()[*axis];
                    let mut pieces = Vec::with_capacity(3);
                    let mut before = shape.to_vec();
                    before[*axis] = *start;
                    let mut after = shape.to_vec();
                    after[*axis] = shape[*axis] - start - len;
                    let zb = Tensor::zeros(&before);
                    let za = Tensor::zeros(&after);
                    pieces.push(&zb);
                    pieces.push(&g);
                    pieces.push(&za);
                    send(*a, Tensor::concat(&pieces, *axis)?);
                }
                Op::LogSumExp(a) => {
                    // d lse / d x = exp(x - lse)
                    let x = val(*a);
                    let soft = zip_broadcast(x, &node.value, "logsumexp", |x, l| (x - l).exp())?;
                    send(*a, soft.mul(&g)?);
                }
                Op::GaussLogDensity(x, m, lv) => {
                    let (xv, mv, lvv) = (val(*x), val(*m), val(*lv));
                    let n = g.len();
                    let mut gx = Vec::with_capacity(n);
                    let mut glv = Vec::with_capacity(n);
                    for k in 0..n {
                        let prec = (-lvv.data()[k]).exp();
                        let r = xv.data()[k] - mv.data()[k];
                        gx.push(-g.data()[k] * r * prec);
                        glv.push(g.data()[k] * 0.5 * (r * r * prec - 1.0));
                    }
                    let shape = g.shape().to_vec();
                    let gx = Tensor::new(shape.clone(), gx)?;
                    if nodes[*m].requires_grad {
                        send(*m, gx.scale(-1.0));
                    }
                    send(*x, gx);
                    send(*lv, Tensor::new(shape, glv)?);
                }
            }
            for (j, grad) in out {
                match &mut adj[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.adj.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape when it received none.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        self.tape
            .binary(self.id, other.id, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        self.tape
            .binary(self.id, other.id, Op::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        self.tape
            .binary(self.id, other.id, Op::Mul(self.id, other.id), |a, b| a.mul(b))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        self.tape
            .binary(self.id, other.id, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape
            .try_unary(self.id, Op::BroadcastTo(self.id), |a| a.broadcast_to(shape))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.try_unary(self.id, Op::Reshape(self.id), |a| {
            a.clone().reshape(shape.to_vec())
        })
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, k), |a| a.scale(k))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |a| a.map(|v| v + k))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with_value(Tensor::len) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.tape
            .try_unary(self.id, Op::SumAxis(self.id), |a| a.sum_axis(axis))
    }

    pub fn relu(&self) -> Var<'t> {
        self.tape.unary(self.id, Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn exp(&self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    /// Natural log; non-positive inputs yield non-finite values for the caller
    /// to detect.
    pub fn log(&self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn square(&self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|v| v * v))
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Clamp(self.id, lo, hi), |a| a.map(|v| v.clamp(lo, hi)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero vars"))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat(&refs, axis)?
        };
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::Concat(ids, axis), rg))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.try_unary(self.id, Op::Narrow(self.id, axis, start), |a| {
            a.narrow(axis, start, len)
        })
    }

    /// Stable log-sum-exp along `axis`, keeping it with size 1.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t>> {
        self.tape
            .try_unary(self.id, Op::LogSumExp(self.id), |a| a.logsumexp_axis(axis))
    }

    /// Elementwise `log N(x; mean, exp(log_var))`. `mean` and `log_var` are
    /// broadcast to the shape of `x`.
    pub fn gaussian_log_density(
        x: &Var<'t>,
        mean: &Var<'t>,
        log_var: &Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let mean = if mean.shape() == shape { *mean } else { mean.broadcast_to(&shape)? };
        let log_var = if log_var.shape() == shape {
            *log_var
        } else {
            log_var.broadcast_to(&shape)?
        };
        let tape = x.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let (xv, mv, lv) = (&nodes[x.id].value, &nodes[mean.id].value, &nodes[log_var.id].value);
            broadcast_shape(xv.shape(), mv.shape(), "gaussian_log_density")?;
            let half_log_2pi = 0.5 * (2.0 * PI).ln();
            let data = (0..xv.len())
                .map(|k| {
                    let r = xv.data()[k] - mv.data()[k];
                    let l = lv.data()[k];
                    -half_log_2pi - 0.5 * l - 0.5 * r * r * (-l).exp()
                })
                .collect();
            Tensor::new(shape, data)?
        };
        let rg = tape.requires(&[x.id, mean.id, log_var.id]);
        Ok(tape.push(value, Op::GaussLogDensity(x.id, mean.id, log_var.id), rg))
    }
}

/// Compares the tape gradient of `f` at `x` against central differences with
/// step `h`. Returns the largest per-coordinate
/// `|autodiff - fd| / (|fd| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = f(xv)?;
    let grad = tape.backward(out)?.wrt(&xv);

    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(p);
        Ok(f(v)?.item())
    };
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteProbe { index: i });
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (grad.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
