//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of operation records. Every method
//! that applies an operation evaluates it eagerly, caches the result on
//! the node and returns a [`Var`] handle. [`Graph::backward`] then walks
//! the tape in reverse and accumulates vector-Jacobian products.
//!
//! Binary elementwise operations accept either two tensors of equal shape
//! or one single-element tensor paired with any tensor. Every other
//! reshaping (row broadcasts, column reductions) is an explicit operation.
//!
//! ```
//! use ibpcl_core::autodiff::Graph;
//! use ibpcl_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use thiserror::Error;

use crate::special;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Pow,
    Max,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Log1mExp,
    LnGamma,
    Digamma,
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, usize),
    Max(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Log1mExp(usize),
    LnGamma(usize),
    Digamma(usize),
    Sum(usize),
    Mean(usize),
    BroadcastRows(usize),
    ColMax(usize),
    CumSumCols(usize),
    SoftmaxLogLik(usize, Vec<usize>),
}

impl Op {
    fn parents(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) | Max(a, b) | MatMul(a, b) => {
                (Some(a), Some(b))
            }
            Scale(a, _) | Offset(a) | Neg(a) | Exp(a) | Log(a) | Sigmoid(a) | Softplus(a)
            | Relu(a) | Log1mExp(a) | LnGamma(a) | Digamma(a) | Sum(a) | Mean(a)
            | BroadcastRows(a) | ColMax(a) | CumSumCols(a) => (Some(a), None),
            SoftmaxLogLik(a, _) => (Some(a), None),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only operation tape. Rebuilt for every minibatch.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

/// Applies `f` elementwise under the scalar-or-equal-shape broadcast rule.
fn broadcast_zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    if b.is_scalar() {
        let s = b.item();
        return Ok(a.map(|x| f(x, s)));
    }
    if a.is_scalar() {
        let s = a.item();
        return Ok(b.map(|y| f(s, y)));
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// Reduces an upstream gradient back to the shape of a (possibly scalar) operand.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.sum()]).expect("scalar operand")
    }
}

/// Expands an operand value to the output shape for use in gradient formulas.
fn expand(t: &Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t.clone()
    } else {
        Tensor::full(like.shape(), t.item())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let (a, b) = op.parents();
        let requires_grad = a.is_some_and(|i| self.nodes[i].requires_grad)
            || b.is_some_and(|i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(op, value))
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (noise, data). No gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Generic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::Pow
            | OpKind::Max => 2,
            _ => 1,
        };
        assert_eq!(inputs.len(), arity, "{kind:?} takes {arity} inputs");
        let a = inputs[0];
        match kind {
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::Div => self.div(a, inputs[1]),
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Pow => self.pow(a, inputs[1]),
            OpKind::Max => self.maximum(a, inputs[1]),
            OpKind::Neg => Ok(self.neg(a)),
            OpKind::Exp => self.exp(a),
            OpKind::Log => self.log(a),
            OpKind::Sigmoid => Ok(self.sigmoid(a)),
            OpKind::Softplus => Ok(self.softplus(a)),
            OpKind::Relu => Ok(self.relu(a)),
            OpKind::Log1mExp => self.log1mexp(a),
            OpKind::LnGamma => self.ln_gamma(a),
            OpKind::Digamma => self.digamma(a),
            OpKind::Sum => Ok(self.sum(a)),
            OpKind::Mean => Ok(self.mean(a)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = broadcast_zip(name, self.value(a), self.value(b), f)?;
        self.push_checked(name, op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// Elementwise `a^b`.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("pow", a, b, Op::Pow(a.0, b.0), f64::powf)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, Op::Max(a.0, b.0), f64::max)
    }

    /// `[N, D] x [D, K] -> [N, K]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = va.matmul(vb);
        self.push_checked("matmul", Op::MatMul(a.0, b.0), value)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push_checked("scale", Op::Scale(a.0, c), value)
    }

    /// Addition of a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push_checked("offset", Op::Offset(a.0), value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push(Op::Neg(a.0), value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push_checked("exp", Op::Exp(a.0), value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push_checked("log", Op::Log(a.0), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(special::sigmoid);
        self.push(Op::Sigmoid(a.0), value)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(special::softplus);
        self.push(Op::Softplus(a.0), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), value)
    }

    /// `ln(1 - e^a)`, defined for `a < 0`.
    pub fn log1mexp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(special::log1mexp);
        self.push_checked("log1mexp", Op::Log1mExp(a.0), value)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(special::ln_gamma);
        self.push_checked("ln_gamma", Op::LnGamma(a.0), value)
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(special::digamma);
        self.push_checked("digamma", Op::Digamma(a.0), value)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a.0), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(a.0), value)
    }

    /// Repeats a `[1, K]` row `n` times into `[n, K]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, t.cols()],
            });
        }
        let k = t.cols();
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![n, k], data)?;
        Ok(self.push(Op::BroadcastRows(a.0), value))
    }

    /// Column-wise maximum of a `[D, K]` matrix, as `[1, K]`.
    pub fn col_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "col_max",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (d, k) = (t.rows(), t.cols());
        let mut out = vec![f64::NEG_INFINITY; k];
        for r in 0..d {
            for (c, o) in out.iter_mut().enumerate() {
                *o = o.max(t.get(r, c));
            }
        }
        let value = Tensor::new(vec![1, k], out)?;
        Ok(self.push(Op::ColMax(a.0), value))
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cumsum_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, k) = (t.rows(), t.cols());
        let mut out = t.clone();
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..k {
                acc += t.get(i, j);
                out.set(i, j, acc);
            }
        }
        Ok(self.push(Op::CumSumCols(a.0), out))
    }

    /// `Σ_n log softmax(logits[n])[labels[n]]` for `[N, C]` logits.
    pub fn softmax_log_lik(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_log_lik",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.cols();
        let mut total = 0.0;
        for (n, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(AutodiffError::BadLabel { label: y, classes: c });
            }
            let row = &t.data()[n * c..(n + 1) * c];
            total += row[y] - log_sum_exp(row);
        }
        let value = Tensor::scalar(total);
        self.push_checked(
            "softmax_log_lik",
            Op::SoftmaxLogLik(logits.0, labels.to_vec()),
            value,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let out = &node.value;
        let send = |grads: &mut [Option<Tensor>], i: usize, contrib: Tensor| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let contrib = unbroadcast(contrib, val(i));
            match &mut grads[i] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ea, eb) = (expand(val(*a), g), expand(val(*b), g));
                send(grads, *a, g.zip_map(&eb, |x, y| x * y));
                send(grads, *b, g.zip_map(&ea, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let eb = expand(val(*b), g);
                send(grads, *a, g.zip_map(&eb, |x, y| x / y));
                // d(a/b)/db = -out / b
                let gb = g.zip_map(out, |x, o| x * o).zip_map(&eb, |x, y| -x / y);
                send(grads, *b, gb);
            }
            Op::Pow(a, b) => {
                let (ea, eb) = (expand(val(*a), g), expand(val(*b), g));
                let mut ga = g.clone();
                for ((x, &base), &e) in ga.data_mut().iter_mut().zip(ea.data()).zip(eb.data()) {
                    *x *= if e == 0.0 { 0.0 } else { e * base.powf(e - 1.0) };
                }
                send(grads, *a, ga);
                let mut gb = g.clone();
                for ((x, &base), &o) in gb.data_mut().iter_mut().zip(ea.data()).zip(out.data()) {
                    *x *= if base > 0.0 { o * base.ln() } else { 0.0 };
                }
                send(grads, *b, gb);
            }
            Op::Max(a, b) => {
                let (ea, eb) = (expand(val(*a), g), expand(val(*b), g));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..g.numel() {
                    if ea.data()[i] >= eb.data()[i] {
                        gb.data_mut()[i] = 0.0;
                    } else {
                        ga.data_mut()[i] = 0.0;
                    }
                }
                send(grads, *a, ga);
                send(grads, *b, gb);
            }
            Op::MatMul(a, b) => {
                send(grads, *a, g.matmul(&val(*b).transpose()));
                send(grads, *b, val(*a).transpose().matmul(g));
            }
            Op::Scale(a, c) => send(grads, *a, g.map(|x| x * c)),
            Op::Offset(a) => send(grads, *a, g.clone()),
            Op::Neg(a) => send(grads, *a, g.map(|x| -x)),
            Op::Exp(a) => send(grads, *a, g.zip_map(out, |x, o| x * o)),
            Op::Log(a) => send(grads, *a, g.zip_map(val(*a), |x, v| x / v)),
            Op::Sigmoid(a) => send(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::Softplus(a) => {
                send(grads, *a, g.zip_map(val(*a), |x, v| x * special::sigmoid(v)))
            }
            Op::Relu(a) => send(
                grads,
                *a,
                g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }),
            ),
            Op::Log1mExp(a) => send(
                grads,
                *a,
                // d/dx ln(1 - e^x) = -1 / (e^{-x} - 1)
                g.zip_map(val(*a), |x, v| -x / (-v).exp_m1()),
            ),
            Op::LnGamma(a) => send(grads, *a, g.zip_map(val(*a), |x, v| x * special::digamma(v))),
            Op::Digamma(a) => send(
                grads,
                *a,
                g.zip_map(val(*a), |x, v| x * special::trigamma(v)),
            ),
            Op::Sum(a) => send(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                send(grads, *a, Tensor::full(val(*a).shape(), g.item() / n))
            }
            Op::BroadcastRows(a) => {
                let k = g.cols();
                let mut acc = vec![0.0; k];
                for r in 0..g.rows() {
                    for (c, s) in acc.iter_mut().enumerate() {
                        *s += g.get(r, c);
                    }
                }
                send(grads, *a, Tensor::row(acc));
            }
            Op::ColMax(a) => {
                let src = val(*a);
                let mut ga = Tensor::zeros(src.shape());
                for c in 0..src.cols() {
                    let m = out.get(0, c);
                    // first row attaining the max receives the gradient
                    if let Some(r) = (0..src.rows()).find(|&r| src.get(r, c) == m) {
                        ga.set(r, c, g.get(0, c));
                    }
                }
                send(grads, *a, ga);
            }
            Op::CumSumCols(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let mut acc = 0.0;
                    for c in (0..g.cols()).rev() {
                        acc += g.get(r, c);
                        ga.set(r, c, acc);
                    }
                }
                send(grads, *a, ga);
            }
            Op::SoftmaxLogLik(a, labels) => {
                let src = val(*a);
                let c = src.cols();
                let up = g.item();
                let mut ga = Tensor::zeros(src.shape());
                for (n, &y) in labels.iter().enumerate() {
                    let row = &src.data()[n * c..(n + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        ga.set(n, j, up * (onehot - p));
                    }
                }
                send(grads, *a, ga);
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
