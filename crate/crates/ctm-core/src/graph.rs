//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes in
//! topological order and is dropped after the backward pass; there is no
//! persistent graph. Every operation validates shapes up front and checks
//! its output for non-finite values — a NaN or Inf is an error, never a
//! silent result.
//!
//! [`Graph::backward`] accumulates adjoints computed in a per-call scratch
//! buffer into each node's persistent gradient buffer, so calling it twice
//! on the same graph doubles every gradient exactly, and each node is
//! visited exactly once per call.

use std::cell::RefCell;

use crate::error::{CtmError, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSumExp(Var),
    MaxPoolRows { input: Var, argmax: Vec<usize> },
    Dropout { input: Var, mask: Vec<T> },
    Transpose(Var),
    Reshape(Var),
    ConcatVec(Vec<Var>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    AddN(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { input: Var, index: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation tape for one forward pass.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>, what: &str) -> Result<Var> {
        if !value.is_all_finite() {
            return Err(CtmError::numeric(format!(
                "{what}: produced a non-finite value"
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Register an input tensor. Trainable leaves receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    /// Register a non-trainable input.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].value.numel(), 1);
        nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn clear_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// Matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
                return Err(CtmError::dim(format!(
                    "matmul: incompatible shapes {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            (
                matmul_impl(ta, tb),
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, req, Op::Matmul(a, b), "matmul")
    }

    fn binary_elementwise(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
        what: &str,
    ) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(CtmError::dim(format!(
                    "{what}: shape mismatch {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(ta.shape().to_vec(), data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, req, op, what)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(&f), nodes[a.0].requires_grad)
        };
        self.push(value, req, op, what)
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a, c), "scale")
    }

    /// Elementwise `max(x, 0)`; backward passes gradient only where `x > 0`.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
            "relu",
        )
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.abs(), Op::Abs(a), "abs")
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a), "sqrt")
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            Op::Sigmoid(a),
            "sigmoid",
        )
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting the row max.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(CtmError::dim(format!(
                    "softmax_rows: expected a matrix, got shape {:?}",
                    t.shape()
                )));
            }
            if !t.is_all_finite() {
                return Err(CtmError::numeric(
                    "softmax_rows: non-finite input".to_string(),
                ));
            }
            (softmax_rows_impl(t), nodes[a.0].requires_grad)
        };
        self.push(value, req, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// `log(sum(exp(x)))` of a vector, stabilized by the max trick.
    pub fn log_sum_exp(&self, a: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 1 {
                return Err(CtmError::dim(format!(
                    "log_sum_exp: expected a vector, got shape {:?}",
                    t.shape()
                )));
            }
            let m = t.data().iter().cloned().fold(T::neg_infinity(), T::max);
            let s: T = t.data().iter().map(|&x| (x - m).exp()).sum();
            (Tensor::scalar(m + s.ln()), nodes[a.0].requires_grad)
        };
        self.push(value, req, Op::LogSumExp(a), "log_sum_exp")
    }

    /// Column-wise max over the rows of a matrix: `[m×l] -> [l]`.
    ///
    /// Backward routes each column's gradient to the first maximal row.
    pub fn max_pool_rows(&self, a: Var) -> Result<Var> {
        let (value, argmax, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 || t.rows() == 0 {
                return Err(CtmError::dim(format!(
                    "max_pool_rows: expected a non-empty matrix, got shape {:?}",
                    t.shape()
                )));
            }
            let (m, l) = (t.rows(), t.cols());
            let mut best = t.row(0).to_vec();
            let mut argmax = vec![0usize; l];
            for i in 1..m {
                for j in 0..l {
                    if t.at(i, j) > best[j] {
                        best[j] = t.at(i, j);
                        argmax[j] = i;
                    }
                }
            }
            (Tensor::vector(best), argmax, nodes[a.0].requires_grad)
        };
        self.push(value, req, Op::MaxPoolRows { input: a, argmax }, "max_pool_rows")
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by `1/(1-rate)`. Identity (the same `Var`, bitwise) when
    /// `rate == 0` or `training` is false. The mask is a deterministic
    /// function of the RNG state.
    pub fn dropout(&self, a: Var, rate: f64, rng: &mut RngState, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CtmError::config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let (value, mask, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mask: Vec<T> = (0..t.numel())
                .map(|_| {
                    if rng.next_f64() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            let data = t
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| x * m)
                .collect();
            (
                Tensor::new(t.shape().to_vec(), data)?,
                mask,
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, req, Op::Dropout { input: a, mask }, "dropout")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(CtmError::dim(format!(
                    "transpose: expected a matrix, got shape {:?}",
                    t.shape()
                )));
            }
            (transpose_impl(t), nodes[a.0].requires_grad)
        };
        self.push(value, req, Op::Transpose(a), "transpose")
    }

    /// Reinterpret the elements under a new shape (row-major order kept).
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.reshaped(shape.to_vec())?,
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, req, Op::Reshape(a), "reshape")
    }

    /// Flatten to a vector in row-major order.
    pub fn flatten(&self, a: Var) -> Result<Var> {
        let n = self.nodes.borrow()[a.0].value.numel();
        self.reshape(a, &[n])
    }

    /// Concatenate vectors into one vector.
    pub fn concat_vec(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CtmError::contract("concat_vec: no inputs".to_string()));
        }
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::new();
            let mut req = false;
            for &p in parts {
                let t = &nodes[p.0].value;
                if t.rank() != 1 {
                    return Err(CtmError::dim(format!(
                        "concat_vec: expected vectors, got shape {:?}",
                        t.shape()
                    )));
                }
                data.extend_from_slice(t.data());
                req |= nodes[p.0].requires_grad;
            }
            (Tensor::vector(data), req)
        };
        self.push(value, req, Op::ConcatVec(parts.to_vec()), "concat_vec")
    }

    /// Stack two matrices with equal column counts: `[m×l],[k×l] -> [(m+k)×l]`.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
                return Err(CtmError::dim(format!(
                    "concat_rows: incompatible shapes {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            (
                Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, req, Op::ConcatRows(a, b), "concat_rows")
    }

    /// Concatenate two matrices with equal row counts along their columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
                return Err(CtmError::dim(format!(
                    "concat_cols: incompatible shapes {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (m, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
            let mut data = Vec::with_capacity(m * (ca + cb));
            for i in 0..m {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(i));
            }
            (
                Tensor::new(vec![m, ca + cb], data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, req, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Elementwise sum of several same-shape tensors.
    pub fn add_n(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CtmError::contract("add_n: no inputs".to_string()));
        }
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let mut acc = first.clone();
            let mut req = nodes[parts[0].0].requires_grad;
            for &p in &parts[1..] {
                let t = &nodes[p.0].value;
                if t.shape() != acc.shape() {
                    return Err(CtmError::dim(format!(
                        "add_n: shape mismatch {:?} vs {:?}",
                        acc.shape(),
                        t.shape()
                    )));
                }
                acc.add_assign(t);
                req |= nodes[p.0].requires_grad;
            }
            (acc, req)
        };
        self.push(value, req, Op::AddN(parts.to_vec()), "add_n")
    }

    /// Select rows of a matrix by index (embedding lookup). Backward
    /// scatter-adds gradients into exactly the selected rows.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(CtmError::contract("gather_rows: empty id list".to_string()));
        }
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.rank() != 2 {
                return Err(CtmError::dim(format!(
                    "gather_rows: expected a matrix, got shape {:?}",
                    t.shape()
                )));
            }
            let mut data = Vec::with_capacity(ids.len() * t.cols());
            for &id in ids {
                if id >= t.rows() {
                    return Err(CtmError::contract(format!(
                        "gather_rows: id {id} out of range for {} rows",
                        t.rows()
                    )));
                }
                data.extend_from_slice(t.row(id));
            }
            (
                Tensor::new(vec![ids.len(), t.cols()], data)?,
                nodes[table.0].requires_grad,
            )
        };
        self.push(
            value,
            req,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Select one element of a vector as a scalar.
    pub fn pick(&self, a: Var, index: usize) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 1 {
                return Err(CtmError::dim(format!(
                    "pick: expected a vector, got shape {:?}",
                    t.shape()
                )));
            }
            if index >= t.numel() {
                return Err(CtmError::contract(format!(
                    "pick: index {index} out of range for length {}",
                    t.numel()
                )));
            }
            (Tensor::scalar(t.data()[index]), nodes[a.0].requires_grad)
        };
        self.push(value, req, Op::Pick { input: a, index }, "pick")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let (value, req) = {
            let nodes = self.nodes.borrow();
            let s: T = nodes[a.0].value.data().iter().cloned().sum();
            (Tensor::scalar(s), nodes[a.0].requires_grad)
        };
        self.push(value, req, Op::Sum(a), "sum")
    }

    // ── Composite helpers ───────────────────────────────────────────────

    /// Dot product of two equal-length vectors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        self.sum(self.mul(a, b)?)
    }

    /// Cosine similarity of two vectors. Zero-norm input is a numeric
    /// error: it signals a degenerate representation upstream.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let nsq_a = self.dot(a, a)?;
        let nsq_b = self.dot(b, b)?;
        if self.scalar_value(nsq_a) == T::zero() || self.scalar_value(nsq_b) == T::zero() {
            return Err(CtmError::numeric(
                "cosine: zero-norm input vector".to_string(),
            ));
        }
        let denom = self.mul(self.sqrt(nsq_a)?, self.sqrt(nsq_b)?)?;
        self.div(self.dot(a, b)?, denom)
    }

    /// Arithmetic mean of several same-shape tensors.
    pub fn mean_of(&self, parts: &[Var]) -> Result<Var> {
        let total = self.add_n(parts)?;
        self.scale(total, T::from_f64(1.0 / parts.len() as f64))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Adjoints are computed in a scratch buffer seeded with 1 at `loss`,
    /// visiting each node exactly once in reverse topological order, then
    /// added into each node's persistent gradient buffer. Gradients
    /// accumulate additively across calls until [`Graph::clear_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.numel() != 1 {
            return Err(CtmError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &mut nodes[i].grad {
                Some(buf) => buf.add_assign(&g),
                slot => *slot = Some(g.clone()),
            }
            backprop_into(&nodes, i, &g, &mut adj);
        }
        Ok(())
    }
}

/// Add `delta` into the scratch adjoint of `v` if that node tracks gradients.
fn acc<T: Real>(
    nodes: &[Node<T>],
    adj: &mut [Option<Tensor<T>>],
    v: Var,
    delta: Tensor<T>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut adj[v.0] {
        Some(buf) => buf.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

/// Propagate the adjoint `g` of node `i` into its inputs' scratch adjoints.
fn backprop_into<T: Real>(
    nodes: &[Node<T>],
    i: usize,
    g: &Tensor<T>,
    adj: &mut [Option<Tensor<T>>],
) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if nodes[a.0].requires_grad {
                let da = matmul_impl(g, &transpose_impl(tb));
                acc(nodes, adj, *a, da);
            }
            if nodes[b.0].requires_grad {
                let db = matmul_impl(&transpose_impl(ta), g);
                acc(nodes, adj, *b, db);
            }
        }
        Op::Add(a, b) => {
            acc(nodes, adj, *a, g.clone());
            acc(nodes, adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, adj, *a, g.clone());
            acc(nodes, adj, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            acc(nodes, adj, *a, zip_map(g, tb, |x, y| x * y));
            acc(nodes, adj, *b, zip_map(g, ta, |x, y| x * y));
        }
        Op::Div(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            acc(nodes, adj, *a, zip_map(g, tb, |x, y| x / y));
            let db = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(ta.data().iter().zip(tb.data().iter()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect(),
            )
            .expect("shape preserved");
            acc(nodes, adj, *b, db);
        }
        Op::Scale(a, c) => {
            let c = *c;
            acc(nodes, adj, *a, g.map(|x| x * c));
        }
        Op::Relu(a) => {
            let ta = &nodes[a.0].value;
            acc(
                nodes,
                adj,
                *a,
                zip_map(g, ta, |gv, x| if x > T::zero() { gv } else { T::zero() }),
            );
        }
        Op::Abs(a) => {
            let ta = &nodes[a.0].value;
            acc(
                nodes,
                adj,
                *a,
                zip_map(g, ta, |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            );
        }
        Op::Sqrt(a) => {
            // d sqrt(x) = g / (2 sqrt(x)); `out` holds sqrt(x)
            let half = T::from_f64(0.5);
            acc(nodes, adj, *a, zip_map(g, out, |gv, y| gv * half / y));
        }
        Op::Sigmoid(a) => {
            acc(
                nodes,
                adj,
                *a,
                zip_map(g, out, |gv, y| gv * y * (T::one() - y)),
            );
        }
        Op::SoftmaxRows(a) => {
            // dx = y ⊙ (g − <g, y>_row)
            let y = out;
            let (m, l) = (y.rows(), y.cols());
            let mut dx = vec![T::zero(); m * l];
            for r in 0..m {
                let mut inner = T::zero();
                for c in 0..l {
                    inner = inner + g.at(r, c) * y.at(r, c);
                }
                for c in 0..l {
                    dx[r * l + c] = y.at(r, c) * (g.at(r, c) - inner);
                }
            }
            acc(
                nodes,
                adj,
                *a,
                Tensor::new(vec![m, l], dx).expect("shape preserved"),
            );
        }
        Op::LogSumExp(a) => {
            let x = &nodes[a.0].value;
            let g0 = g.data()[0];
            let m = x.data().iter().cloned().fold(T::neg_infinity(), T::max);
            let denom: T = x.data().iter().map(|&v| (v - m).exp()).sum();
            let dx = x.map(|v| g0 * (v - m).exp() / denom);
            acc(nodes, adj, *a, dx);
        }
        Op::MaxPoolRows { input, argmax } => {
            let t = &nodes[input.0].value;
            let (m, l) = (t.rows(), t.cols());
            let mut dx = vec![T::zero(); m * l];
            for (j, &r) in argmax.iter().enumerate() {
                dx[r * l + j] = g.data()[j];
            }
            acc(
                nodes,
                adj,
                *input,
                Tensor::new(vec![m, l], dx).expect("shape preserved"),
            );
        }
        Op::Dropout { input, mask } => {
            let dx = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &mv)| gv * mv)
                    .collect(),
            )
            .expect("shape preserved");
            acc(nodes, adj, *input, dx);
        }
        Op::Transpose(a) => {
            acc(nodes, adj, *a, transpose_impl(g));
        }
        Op::Reshape(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            acc(
                nodes,
                adj,
                *a,
                g.reshaped(shape).expect("numel preserved"),
            );
        }
        Op::ConcatVec(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                let piece = Tensor::vector(g.data()[offset..offset + len].to_vec());
                acc(nodes, adj, p, piece);
                offset += len;
            }
        }
        Op::ConcatRows(a, b) => {
            let (ra, l) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let rb = nodes[b.0].value.rows();
            let da = Tensor::new(vec![ra, l], g.data()[..ra * l].to_vec()).expect("split");
            let db = Tensor::new(vec![rb, l], g.data()[ra * l..].to_vec()).expect("split");
            acc(nodes, adj, *a, da);
            acc(nodes, adj, *b, db);
        }
        Op::ConcatCols(a, b) => {
            let (m, ca) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let cb = nodes[b.0].value.cols();
            let mut da = Vec::with_capacity(m * ca);
            let mut db = Vec::with_capacity(m * cb);
            for i in 0..m {
                let row = g.row(i);
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..]);
            }
            acc(nodes, adj, *a, Tensor::new(vec![m, ca], da).expect("split"));
            acc(nodes, adj, *b, Tensor::new(vec![m, cb], db).expect("split"));
        }
        Op::AddN(parts) => {
            for &p in parts {
                acc(nodes, adj, p, g.clone());
            }
        }
        Op::GatherRows { table, ids } => {
            let t = &nodes[table.0].value;
            let (rows, l) = (t.rows(), t.cols());
            let mut dt = vec![T::zero(); rows * l];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..l {
                    dt[id * l + c] = dt[id * l + c] + g.at(r, c);
                }
            }
            acc(
                nodes,
                adj,
                *table,
                Tensor::new(vec![rows, l], dt).expect("shape preserved"),
            );
        }
        Op::Pick { input, index } => {
            let len = nodes[input.0].value.numel();
            let mut dx = vec![T::zero(); len];
            dx[*index] = g.data()[0];
            acc(nodes, adj, *input, Tensor::vector(dx));
        }
        Op::Sum(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            let g0 = g.data()[0];
            acc(nodes, adj, *a, Tensor::filled(shape, g0));
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

fn matmul_impl<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("shape arithmetic")
}

fn transpose_impl<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.at(i, j);
        }
    }
    Tensor::new(vec![n, m], out).expect("shape arithmetic")
}

fn softmax_rows_impl<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = t.row(i);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            denom = denom + e;
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / denom;
        }
    }
    Tensor::new(vec![m, n], out).expect("shape arithmetic")
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("shape preserved")
}
