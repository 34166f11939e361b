//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the rule that maps an upstream sensitivity back onto the
//! node's inputs. Nodes are appended in evaluation order, so the node list is
//! already a topological order of the (acyclic) graph and [`Tape::backward`]
//! simply walks it in reverse, visiting each node once.
//!
//! The tape is rebuilt for every training iteration. Leaves created with
//! [`Tape::param`] are trainable; leaves created with [`Tape::constant`] never
//! receive gradients, and the backward pass skips every node that does not
//! depend on a trainable leaf.
//!
//! Binary elementwise operations broadcast along any dimension of size one
//! (scalars, row vectors against matrices, column vectors against matrices).
//! Domain violations such as `log` of a non-positive value are reported as
//! [`Error::Domain`] rather than producing NaN.
//!
//! Operations that are awkward to express through the primitive set (matrix
//! exponentials, fused likelihood kernels, implicit sampling gradients) plug
//! in through [`CustomOp`].

mod check;
mod tensor;

pub use check::{check_gradients, check_gradients_multi};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::special;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Maps the upstream gradient `grad` (shaped like `output`) onto each input.
    /// Returning `None` for an input means its contribution is zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Relu(Var),
    Softplus(Var),
    LnGamma(Var),
    Digamma(Var),
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    Cols(Var, usize),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that fed it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a.shape(), rhs: b.shape() }),
    }
}

#[inline]
fn bget(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    t.get(rr, cc)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape.0, shape.1, data);
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            out.set(r, c, f(bget(a, r, c), bget(b, r, c)));
        }
    }
    out
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.as_mut_slice().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.as_mut_slice().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_domain(op: &'static str, t: &Tensor, ok: impl Fn(f64) -> bool) -> Result<()> {
    match t.as_slice().iter().find(|&&v| !ok(v)) {
        Some(&value) => Err(Error::Domain { op, value }),
        None => Ok(()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, va, vb)?;
        let value = zip_broadcast(va, vb, shape, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_domain("div", self.value(b), |v| v != 0.0)?;
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.unary(a, value, Op::Neg(a))
    }

    /// `a * factor` for a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.unary(a, value, Op::Scale(a, factor))
    }

    /// `a + offset` for a constant offset.
    pub fn offset(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.unary(a, value, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        check_domain("log", self.value(a), |v| v > 0.0)?;
        let value = self.value(a).map(f64::ln);
        Ok(self.unary(a, value, Op::Log(a)))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        check_domain("pow", self.value(a), |v| v > 0.0 || (integral && (v != 0.0 || p >= 1.0)))?;
        let value = self.value(a).map(|x| x.powf(p));
        Ok(self.unary(a, value, Op::Pow(a, p)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.unary(a, value, Op::Softplus(a))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        check_domain("ln_gamma", self.value(a), |v| v > 0.0)?;
        let value = self.value(a).map(special::ln_gamma);
        Ok(self.unary(a, value, Op::LnGamma(a)))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        check_domain("digamma", self.value(a), |v| v > 0.0)?;
        let value = self.value(a).map(special::digamma);
        Ok(self.unary(a, value, Op::Digamma(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Shape { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let value = va.matmul(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(a, value, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.unary(a, value, Op::LogSoftmax(a))
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    /// Per-row sums: r×c → r×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::new(t.rows(), 1, data);
        self.unary(a, value, Op::SumRows(a))
    }

    /// Per-column sums: r×c → 1×c.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut value = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let v = value.get(0, c) + t.get(r, c);
                value.set(0, c, v);
            }
        }
        self.unary(a, value, Op::SumCols(a))
    }

    /// Concatenates along columns; every part must have the same row count.
    /// Stacking 1×1 scalars yields a row vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Shape { op: "stack", lhs: (rows, total), rhs: t.shape() });
            }
            for r in 0..rows {
                for c in 0..t.cols() {
                    value.set(r, offset + c, t.get(r, c));
                }
            }
            offset += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenates along rows; every part must have the same column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape { op: "stack_rows", lhs: (rows, cols), rhs: t.shape() });
            }
            data.extend_from_slice(t.as_slice());
            rows += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::Shape { op: "rows", lhs: t.shape(), rhs: (start + len, t.cols()) });
        }
        let cols = t.cols();
        let value = Tensor::new(len, cols, t.as_slice()[start * cols..(start + len) * cols].to_vec());
        Ok(self.unary(a, value, Op::Rows(a, start)))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::Shape { op: "cols", lhs: t.shape(), rhs: (t.rows(), start + len) });
        }
        let mut value = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            for c in 0..len {
                value.set(r, c, t.get(r, start + c));
            }
        }
        Ok(self.unary(a, value, Op::Cols(a, start)))
    }

    /// Single element `(r, c)` as a 1×1 node.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let row = self.rows(a, r, 1)?;
        self.cols(row, c, 1)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(Error::Shape { op: "reshape", lhs: t.shape(), rhs: (rows, cols) });
        }
        let value = Tensor::new(rows, cols, t.as_slice().to_vec());
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    /// Records an externally computed `value` whose gradient follows `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: impl CustomOp + 'static) -> Var {
        let rg = inputs.iter().any(|&p| self.rg(p));
        self.push(value, Op::Custom(inputs.to_vec(), Box::new(rule)), rg)
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g.clone(), val(*a).shape()));
                self.accumulate(grads, *b, reduce_to(g.clone(), val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g.clone(), val(*a).shape()));
                self.accumulate(grads, *b, reduce_to(g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let ga = zip_broadcast(g, vb, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.rg(*b) {
                    let gb = zip_broadcast(g, va, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let ga = zip_broadcast(g, vb, g.shape(), |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = zip_broadcast(g, out, g.shape(), |x, y| -x * y);
                    let gb = zip_broadcast(&t, vb, g.shape(), |x, y| x / y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, zip_broadcast(g, out, g.shape(), |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip_broadcast(g, val(*a), g.shape(), |x, y| x / y)),
            Op::Pow(a, p) => {
                let p = *p;
                let ga = zip_broadcast(g, val(*a), g.shape(), |x, y| x * p * y.powf(p - 1.0));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_broadcast(g, val(*a), g.shape(), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_broadcast(g, val(*a), g.shape(), |x, y| x * sigmoid(y));
                self.accumulate(grads, *a, ga);
            }
            Op::LnGamma(a) => {
                let ga = zip_broadcast(g, val(*a), g.shape(), |x, y| x * special::digamma(y));
                self.accumulate(grads, *a, ga);
            }
            Op::Digamma(a) => {
                let ga = zip_broadcast(g, val(*a), g.shape(), |x, y| x * special::trigamma(y));
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(&val(*b).transpose()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, val(*a).transpose().matmul(g));
                }
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.as_mut_slice().chunks_mut(cols).zip(out.as_slice().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (x, y) in grow.iter_mut().zip(yrow) {
                        *x = y * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.as_mut_slice().chunks_mut(cols).zip(out.as_slice().chunks(cols)) {
                    let total: f64 = grow.iter().sum();
                    for (x, y) in grow.iter_mut().zip(yrow) {
                        *x -= y.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        ga.set(i, j, g.get(i, 0));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        ga.set(i, j, g.get(0, j));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                gp.set(i, j, g.get(i, offset + j));
                            }
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let r = val(p).rows();
                    if self.rg(p) {
                        let data = g.as_slice()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::new(r, cols, data));
                    }
                    offset += r;
                }
            }
            Op::Rows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                self.accumulate(grads, *a, ga);
            }
            Op::Cols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Tensor::new(r, c, g.as_slice().to_vec()));
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&p| val(p)).collect();
                let contributions = rule.backward(&values, out, g);
                debug_assert_eq!(contributions.len(), inputs.len(), "{} returned wrong arity", rule.name());
                for (&p, gp) in inputs.iter().zip(contributions) {
                    if let Some(gp) = gp {
                        self.accumulate(grads, p, gp);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
