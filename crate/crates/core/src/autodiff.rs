//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every primitive appends a
//! node whose parents already live in the arena, so node ids are a valid
//! topological order and the graph is acyclic by construction. A fresh graph
//! is built for every forward pass; parameters enter as leaves.
//!
//! Only the broadcast the model needs is supported: adding a `1×c` row to
//! every row of an `r×c` matrix ([`Graph::add_row`]), plus scaling by a `1×1`
//! node ([`Graph::mul_scalar`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// An `n×1` column.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Contract(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    MulScalar,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Log,
    /// `log σ(x)`, evaluated without forming `σ(x)`.
    LogSigmoid,
    Neg,
    Recip,
    Sum,
    Mean,
    Square,
    Clamp { lo: f64, hi: f64 },
    ConcatCols,
    SelectRows(Vec<usize>),
    /// Row-wise `log Σ_j exp(x_ij)`, producing an `r×1` column.
    LogSumExpRows,
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Matrix> {
        self.by_leaf.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// An append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

    fn push(&mut self, value: Matrix, op: Op, parents: Vec<NodeId>) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(value, op, parents, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Matrix,
        op: Op,
        parents: Vec<NodeId>,
        requires_grad: bool,
    ) -> NodeId {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.nodes.push(Node {
            value,
            grad,
            op,
            parents,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push_node(value, Op::Leaf, Vec::new(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_node(value, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data[0]
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (l, r) = (self.shape(a), self.shape(b));
        if l != r {
            return Err(Error::Shape {
                op,
                left: l,
                right: r,
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(x).map(f);
        self.push(value, op, vec![x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul, vec![a, b]))
    }

    /// `x + row` with the `1×c` row repeated down every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs.0 != 1 || rs.1 != xs.1 {
            return Err(Error::Shape {
                op: "add-broadcast-row",
                left: xs,
                right: rs,
            });
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data.clone();
        for chunk in value.data.chunks_mut(xs.1.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow, vec![x, row]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub, vec![a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("elementwise-mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul, vec![a, b]))
    }

    /// Every entry of `x` times the single entry of the `1×1` node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape {
                op: "mul-scalar",
                left: self.shape(x),
                right: self.shape(s),
            });
        }
        let k = self.value(s).data[0];
        let value = self.value(x).map(|v| v * k);
        Ok(self.push(value, Op::MulScalar, vec![x, s]))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.unary(x, Op::Scale(factor), |v| v * factor)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh, f64::tanh)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(i) = v.data.iter().position(|&e| !(e > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                row: i / v.cols,
                col: i % v.cols,
                value: v.data[i],
            });
        }
        Ok(self.unary(x, Op::Log, f64::ln))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::LogSigmoid, log_sigmoid)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Neg, |v| -v)
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(i) = v.data.iter().position(|&e| e == 0.0) {
            return Err(Error::Domain {
                op: "recip",
                row: i / v.cols,
                col: i % v.cols,
                value: 0.0,
            });
        }
        Ok(self.unary(x, Op::Recip, |v| 1.0 / v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let value = Matrix::scalar(v.sum() / v.len() as f64);
        Ok(self.push(value, Op::Mean, vec![x]))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square, |v| v * v)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where the
    /// bound is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat-cols of zero inputs".into()));
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat-cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.data[r * cols + offset..r * cols + offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols, parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let rows = self.shape(x).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "select-rows",
                left: self.shape(x),
                right: (bad, 0),
            });
        }
        let value = self.value(x).select_rows(indices);
        Ok(self.push(value, Op::SelectRows(indices.to_vec()), vec![x]))
    }

    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<f64> = (0..v.rows)
            .map(|r| {
                let row = v.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return max;
                }
                max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Matrix::column(out), Op::LogSumExpRows, vec![x])
    }

    /// Propagates `d root / d node` to every node that requires a gradient,
    /// adds it to the stored gradients, and returns the stored gradients of
    /// all trainable leaves. Leaves the root does not depend on get zeros.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 root, got {:?}",
                self.shape(root)
            )));
        }
        let mut adjoint: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adjoint[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adjoint[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad.add_assign(&g);
            for (parent, contribution) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adjoint[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }

        let by_leaf = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Leaf && n.requires_grad)
            .map(|(i, n)| (NodeId(i), n.grad.clone()))
            .collect();
        Ok(Gradients { by_leaf })
    }

    /// Vector-Jacobian products for each parent of node `i`.
    fn local_grads(&self, i: usize, g: &Matrix) -> Vec<(NodeId, Matrix)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (a, b) = (val(p[0]), val(p[1]));
                let mut out = Vec::with_capacity(2);
                if self.nodes[p[0].0].requires_grad {
                    out.push((p[0], g.matmul(&b.transpose()).expect("shapes checked")));
                }
                if self.nodes[p[1].0].requires_grad {
                    out.push((p[1], a.transpose().matmul(g).expect("shapes checked")));
                }
                out
            }
            Op::AddRow => {
                let mut col_sums = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (s, v) in col_sums.data.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                vec![(p[0], g.clone()), (p[1], col_sums)]
            }
            Op::Add => vec![(p[0], g.clone()), (p[1], g.clone())],
            Op::Sub => vec![(p[0], g.clone()), (p[1], g.map(|v| -v))],
            Op::Mul => vec![
                (p[0], g.zip_map(val(p[1]), |a, b| a * b)),
                (p[1], g.zip_map(val(p[0]), |a, b| a * b)),
            ],
            Op::MulScalar => {
                let k = val(p[1]).data[0];
                let ds = g.zip_map(val(p[0]), |a, b| a * b).sum();
                vec![(p[0], g.map(|v| v * k)), (p[1], Matrix::scalar(ds))]
            }
            Op::Scale(f) => vec![(p[0], g.map(|v| v * f))],
            Op::Relu => vec![(p[0], g.zip_map(val(p[0]), |d, x| if x > 0.0 { d } else { 0.0 }))],
            Op::Sigmoid => vec![(p[0], g.zip_map(y, |d, s| d * s * (1.0 - s)))],
            Op::Tanh => vec![(p[0], g.zip_map(y, |d, t| d * (1.0 - t * t)))],
            Op::Log => vec![(p[0], g.zip_map(val(p[0]), |d, x| d / x))],
            Op::LogSigmoid => vec![(p[0], g.zip_map(val(p[0]), |d, x| d * sigmoid(-x)))],
            Op::Neg => vec![(p[0], g.map(|v| -v))],
            Op::Recip => vec![(p[0], g.zip_map(val(p[0]), |d, x| -d / (x * x)))],
            Op::Sum => {
                let (r, c) = val(p[0]).shape();
                vec![(p[0], Matrix::filled(r, c, g.data[0]))]
            }
            Op::Mean => {
                let (r, c) = val(p[0]).shape();
                vec![(p[0], Matrix::filled(r, c, g.data[0] / (r * c) as f64))]
            }
            Op::Square => vec![(p[0], g.zip_map(val(p[0]), |d, x| 2.0 * x * d))],
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    p[0],
                    g.zip_map(val(p[0]), |d, x| if x >= lo && x <= hi { d } else { 0.0 }),
                )]
            }
            Op::ConcatCols => {
                let mut offset = 0;
                p.iter()
                    .map(|&part| {
                        let cols = val(part).cols;
                        let mut piece = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            piece.data[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        (part, piece)
                    })
                    .collect()
            }
            Op::SelectRows(indices) => {
                let src = val(p[0]);
                let mut out = Matrix::zeros(src.rows, src.cols);
                for (k, &r) in indices.iter().enumerate() {
                    for (o, v) in out.data[r * src.cols..(r + 1) * src.cols]
                        .iter_mut()
                        .zip(g.row(k))
                    {
                        *o += v;
                    }
                }
                vec![(p[0], out)]
            }
            Op::LogSumExpRows => {
                let x = val(p[0]);
                let mut out = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let lse = y.data[r];
                    for c in 0..x.cols {
                        out.data[r * x.cols + c] = g.data[r] * (x.get(r, c) - lse).exp();
                    }
                }
                vec![(p[0], out)]
            }
        }
    }

    /// Zeros the stored gradient of every listed node; values are untouched.
    pub fn reset_grads(&mut self, nodes: &[NodeId]) {
        for id in nodes {
            self.nodes[id.0].grad.data.fill(0.0);
        }
    }

    pub fn reset_all_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.data.fill(0.0);
        }
    }
}
