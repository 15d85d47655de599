//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; nodes are
//! stored in execution order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use dialrank::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::row(&[1.0, -2.0, 3.0]));
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Vectors travel as `1 × n` rows. Broadcasting is never implicit: use
//! [`Var::broadcast_to`] to expand a row or column.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Rows whose Euclidean norm falls below this pass through `l2_normalize`
/// unchanged.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Softmax { x: usize, axis: usize },
    PowerNorm(usize),
    L2Normalize { x: usize, axis: usize, norms: Vec<f64> },
    Transpose(usize),
    BroadcastTo(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows { x: usize, index: Vec<usize> },
    BlockSumCols { x: usize, blocks: usize },
    Reshape(usize),
    Sum(usize),
    ScaleRows { x: usize, factors: Vec<f64> },
    CrossEntropy { x: usize, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations for one forward/backward cycle.
#[derive(Debug, Default)]
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
        write!(f, "Var({}, {:?})", self.id, self.shape())
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was
    /// reachable from the loss and requires a gradient.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Populates `grad` on every node that requires one and is reachable
    /// from `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::NonScalarLoss(nodes[loss.id].value.shape().to_vec()));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop_node(&nodes, id, &g, &mut grads);
                nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }
}

fn acc<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].value.dims2().unwrap();
            let n = nodes[*b].value.cols();
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                // dA = dC · Bᵀ
                gemm_nt(g, bv, ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // dB = Aᵀ · dC
                gemm_tn(av, g, gb, m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            // C = A Bᵀ with A[m×k], B[n×k]
            let (m, k) = nodes[*a].value.dims2().unwrap();
            let n = nodes[*b].value.rows();
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_nn(g, bv, ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_tn(g, av, gb, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for x in [*a, *b] {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += c * d);
            }
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Tanh(x) => {
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = out.data();
            let (outer, n, inner) = axis_layout(out.shape(), *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * n * inner + i * inner + j;
                        let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
        }
        Op::PowerNorm(x) => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    let a = xv[i].abs();
                    if a > 0.0 {
                        gx[i] += g[i] * 0.5 / a.sqrt();
                    }
                }
            }
        }
        Op::L2Normalize { x, axis, norms } => {
            let y = out.data();
            let (outer, n, inner) = axis_layout(out.shape(), *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * n * inner + i * inner + j;
                        let norm = norms[o * inner + j];
                        if norm > L2_EPS {
                            let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                gx[at(i)] += (g[at(i)] - y[at(i)] * dot) / norm;
                            }
                        } else {
                            for i in 0..n {
                                gx[at(i)] += g[at(i)];
                            }
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = nodes[*x].value.dims2().unwrap();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::BroadcastTo(x) => {
            let (sr, sc) = nodes[*x].value.dims2().unwrap();
            let (r, c) = out.dims2().unwrap();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[(i % sr) * sc + (j % sc)] += g[i * c + j];
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let (r, c) = nodes[*x].value.dims2().unwrap();
            let w = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (r, c) = out.dims2().unwrap();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * c + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(gp) = acc(nodes, grads, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(o, d)| *o += d);
                }
                offset += n;
            }
        }
        Op::GatherRows { x, index } => {
            let c = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[i * c + j];
                    }
                }
            }
        }
        Op::BlockSumCols { x, blocks } => {
            let (r, w) = out.dims2().unwrap();
            let c = w * blocks;
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    for b in 0..*blocks {
                        for j in 0..w {
                            gx[i * c + b * w + j] += g[i * w + j];
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::ScaleRows { x, factors } => {
            let c = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, f) in factors.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += f * g[i * c + j];
                    }
                }
            }
        }
        Op::CrossEntropy { x, targets, probs } => {
            let c = nodes[*x].value.cols();
            let scale = g[0] / targets.len() as f64;
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gx[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id]
            .value
            .dims2()
            .unwrap_or((0, 0))
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_values<R>(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs_grad(&[self.id]);
        self.tape.push(value, rg, op)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        self.tape.push(value, rg, op)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        self.with_value(|t| match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[])),
        })
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let value = self.with_values(other, |a, b| {
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        });
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`; `other` is `[n × k]`, as with row-major weight
    /// matrices stored `[out × in]`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.matrix_dims("matmul_t")?;
        let (n, k2) = other.matrix_dims("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", &[m, k], &[n, k2]));
        }
        let value = self.with_values(other, |a, b| {
            let mut out = vec![0.0; m * n];
            gemm_nt(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        });
        Ok(self.binary(other, value, Op::MatMulT(self.id, other.id)))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.with_values(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(op_name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.with_value(|t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
        });
        self.unary(value, Op::Scale(self.id, c))
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_value(|t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.map(sigmoid);
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.map(f64::tanh);
        self.unary(value, Op::Tanh(self.id))
    }

    /// Signed square root `sign(x)·sqrt(|x|)`. The backward pass uses a
    /// zero subgradient at `x = 0`.
    pub fn power_norm(self) -> Var<'t> {
        let value = self.map(|x| x.signum() * x.abs().sqrt());
        let value = Tensor::from_parts(
            value.shape().to_vec(),
            value.into_data().into_iter().map(|x| if x == 0.0 { 0.0 } else { x }).collect(),
        );
        self.unary(value, Op::PowerNorm(self.id))
    }

    /// Max-subtracted softmax over `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            if axis >= t.shape().len() {
                return Err(Error::Axis {
                    op: "softmax",
                    axis,
                    shape: t.shape().to_vec(),
                });
            }
            let (outer, n, inner) = axis_layout(t.shape(), axis);
            let x = t.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| o * n * inner + i * inner + j;
                    let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for i in 0..n {
                        let e = (x[at(i)] - max).exp();
                        y[at(i)] = e;
                        total += e;
                    }
                    for i in 0..n {
                        y[at(i)] /= total;
                    }
                }
            }
            Ok(Tensor::from_parts(t.shape().to_vec(), y))
        })?;
        Ok(self.unary(value, Op::Softmax { x: self.id, axis }))
    }

    /// Scales every slice along `axis` to unit Euclidean norm; slices with
    /// norm at most [`L2_EPS`] pass through unchanged.
    pub fn l2_normalize(self, axis: usize) -> Result<Var<'t>> {
        let (value, norms) = self.with_value(|t| {
            if axis >= t.shape().len() {
                return Err(Error::Axis {
                    op: "l2_normalize",
                    axis,
                    shape: t.shape().to_vec(),
                });
            }
            let (outer, n, inner) = axis_layout(t.shape(), axis);
            let x = t.data();
            let mut y = x.to_vec();
            let mut norms = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| o * n * inner + i * inner + j;
                    let norm = (0..n).map(|i| x[at(i)] * x[at(i)]).sum::<f64>().sqrt();
                    norms[o * inner + j] = norm;
                    if norm > L2_EPS {
                        for i in 0..n {
                            y[at(i)] = x[at(i)] / norm;
                        }
                    }
                }
            }
            Ok((Tensor::from_parts(t.shape().to_vec(), y), norms))
        })?;
        Ok(self.unary(
            value,
            Op::L2Normalize {
                x: self.id,
                axis,
                norms,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.transpose())?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    /// Expands a `1 × c`, `r × 1` or `1 × 1` matrix to `rows × cols` by
    /// repetition.
    pub fn broadcast_to(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (sr, sc) = self.matrix_dims("broadcast_to")?;
        let ok = (sr == rows || sr == 1) && (sc == cols || sc == 1);
        if !ok {
            return Err(Error::shape("broadcast_to", &[sr, sc], &[rows, cols]));
        }
        let value = self.with_value(|t| {
            let x = t.data();
            let mut y = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    y.push(x[(i % sr) * sc + (j % sc)]);
                }
            }
            Tensor::from_parts(vec![rows, cols], y)
        });
        Ok(self.unary(value, Op::BroadcastTo(self.id)))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::OutOfRange {
                what: "column",
                index: start + len,
                len: c,
            });
        }
        let value = self.with_value(|t| {
            let x = t.data();
            let mut y = Vec::with_capacity(r * len);
            for i in 0..r {
                y.extend_from_slice(&x[i * c + start..i * c + start + len]);
            }
            Tensor::from_parts(vec![r, len], y)
        });
        Ok(self.unary(value, Op::SliceCols { x: self.id, start }))
    }

    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("gather_rows")?;
        if index.is_empty() {
            return Err(Error::Invalid("gather_rows: empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange {
                what: "row",
                index: bad,
                len: r,
            });
        }
        let value = self.with_value(|t| {
            let x = t.data();
            let mut y = Vec::with_capacity(index.len() * c);
            for &i in index {
                y.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
            Tensor::from_parts(vec![index.len(), c], y)
        });
        Ok(self.unary(
            value,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Sums `blocks` equal-width column blocks: `[r × blocks·w] → [r × w]`.
    pub fn block_sum_cols(self, blocks: usize) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("block_sum_cols")?;
        if blocks == 0 || c % blocks != 0 {
            return Err(Error::Invalid(format!(
                "block_sum_cols: {c} columns do not split into {blocks} blocks"
            )));
        }
        let w = c / blocks;
        let value = self.with_value(|t| {
            let x = t.data();
            let mut y = vec![0.0; r * w];
            for i in 0..r {
                for b in 0..blocks {
                    for j in 0..w {
                        y[i * w + j] += x[i * c + b * w + j];
                    }
                }
            }
            Tensor::from_parts(vec![r, w], y)
        });
        Ok(self.unary(value, Op::BlockSumCols { x: self.id, blocks }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.reshaped(shape))?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Sum of all entries as a shape-`[1]` scalar.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(|t| t.sum()));
        self.unary(value, Op::Sum(self.id))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(self, factors: &[f64]) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("scale_rows")?;
        if factors.len() != r {
            return Err(Error::shape("scale_rows", &[r, c], &[factors.len()]));
        }
        let value = self.with_value(|t| {
            let x = t.data();
            let mut y = Vec::with_capacity(r * c);
            for (i, f) in factors.iter().enumerate() {
                y.extend(x[i * c..(i + 1) * c].iter().map(|v| v * f));
            }
            Tensor::from_parts(vec![r, c], y)
        });
        Ok(self.unary(
            value,
            Op::ScaleRows {
                x: self.id,
                factors: factors.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("cross_entropy")?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::OutOfRange {
                what: "target",
                index: bad,
                len: c,
            });
        }
        let (loss, probs) = self.with_value(|t| {
            let x = t.data();
            let mut probs = vec![0.0; r * c];
            let mut loss = 0.0;
            for (i, &target) in targets.iter().enumerate() {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + total.ln();
                loss += lse - row[target];
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
            }
            (loss / r as f64, probs)
        });
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Affine map `self · weightᵀ + bias` with `weight: [out × in]` and
    /// `bias: [1 × out]` broadcast over rows.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul_t(weight)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let (r, c) = y.dims2();
                let b = if r == 1 { b } else { b.broadcast_to(r, c)? };
                y.add(b)
            }
        }
    }
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat_cols: no inputs".into()))?;
    let tape = first.tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let dims: Vec<(usize, usize)> = ids
            .iter()
            .map(|&i| {
                let t = &nodes[i].value;
                match t.shape() {
                    [r, c] => Ok((*r, *c)),
                    s => Err(Error::shape("concat_cols", s, &[])),
                }
            })
            .collect::<Result<_>>()?;
        let r = dims[0].0;
        if let Some(d) = dims.iter().find(|d| d.0 != r) {
            return Err(Error::shape("concat_cols", &[dims[0].0, dims[0].1], &[d.0, d.1]));
        }
        let c: usize = dims.iter().map(|d| d.1).sum();
        let mut y = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&id, d) in ids.iter().zip(&dims) {
                y.extend_from_slice(&nodes[id].value.data()[i * d.1..(i + 1) * d.1]);
            }
        }
        Tensor::from_parts(vec![r, c], y)
    };
    let rg = tape.needs_grad(&ids);
    Ok(tape.push(value, rg, Op::ConcatCols(ids)))
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat_rows: no inputs".into()))?;
    let tape = first.tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let c = nodes[ids[0]].value.cols();
        let mut rows = 0;
        let mut y = Vec::new();
        for &id in &ids {
            let t = &nodes[id].value;
            match t.shape() {
                [r, cc] if *cc == c => {
                    rows += r;
                    y.extend_from_slice(t.data());
                }
                s => return Err(Error::shape("concat_rows", &[rows, c], s)),
            }
        }
        Tensor::from_parts(vec![rows, c], y)
    };
    let rg = tape.needs_grad(&ids);
    Ok(tape.push(value, rg, Op::ConcatRows(ids)))
}
