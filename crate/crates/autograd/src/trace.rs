//! Append-only computation trace and its reverse pass.
//!
//! Every forward op appends one node holding its output value and whatever
//! it needs for the gradient. Nodes only reference earlier nodes, so the
//! append order is a topological order and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::matrix::{matmul_at_into, matmul_bt_into, Matrix, Shape};
use crate::params::{ParamId, ParamStore, StoreId};

/// Handle to a node of a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    MaxCols(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Stabilize(Var),
    Threshold(Var, f64),
    Unfold(Var, usize),
    Fold(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation trace. Single-writer: build, run `backward`
/// once, then read gradients or route them into parameter stores.
#[derive(Debug, Default)]
pub struct Trace {
    nodes: Vec<Node>,
    params: HashMap<(StoreId, ParamId), Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, lhs: Shape, rhs: Shape) -> TensorError {
    TensorError::ShapeMismatch { op, lhs, rhs }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.data.len()]))
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// was on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is kept for inspection.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter (once per trace) and returns its leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.id(), id);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, !store.is_frozen());
        self.params.insert(key, v);
        v
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Matrix {
            shape: va.shape,
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    /// `a[m x n] + r[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(r));
        if sr.rows != 1 || sr.cols != sa.cols {
            return Err(mismatch("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let row = self.value(r).data.clone();
        for i in 0..sa.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&row) {
                *o += v;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(out, Op::AddRow(a, r), rg))
    }

    /// `a[m x n] * r[1 x n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(r));
        if sr.rows != 1 || sr.cols != sa.cols {
            return Err(mismatch("mul_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let row = self.value(r).data.clone();
        for i in 0..sa.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&row) {
                *o *= v;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(out, Op::MulRow(a, r), rg))
    }

    /// `a[m x n] * c[m x 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(c));
        if sc.cols != 1 || sc.rows != sa.rows {
            return Err(mismatch("mul_col", sa, sc));
        }
        let mut out = self.value(a).clone();
        let col = self.value(c).data.clone();
        for (i, cv) in col.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o *= cv);
        }
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(out, Op::MulCol(a, c), rg))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let va = self.value(a);
        Matrix {
            shape: va.shape,
            data: va.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.map(a, |x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.map(a, |x| x + k);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, k)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Adds `sign(a) * delta` (with `sign(0) = +1`); gradient passes through.
    pub fn stabilize(&mut self, a: Var, delta: f64) -> Var {
        let out = self.map(a, |x| if x >= 0.0 { x + delta } else { x - delta });
        let rg = self.rg(a);
        self.push(out, Op::Stabilize(a), rg)
    }

    /// Zeroes entries below `eps`; the rest pass unchanged.
    pub fn threshold(&mut self, a: Var, eps: f64) -> Var {
        let out = self.map(a, |x| if x < eps { 0.0 } else { x });
        let rg = self.rg(a);
        self.push(out, Op::Threshold(a, eps), rg)
    }

    // ---- row-wise normalizers ----------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            softmax_row(va.row(i), out.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            log_softmax_row(va.row(i), out.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    // ---- structure -------------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let rows = self.shape(first).rows;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.rows != rows {
                return Err(mismatch("concat_cols", self.shape(first), s));
            }
            cols += s.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            let c = v.cols();
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = self.shape(first).cols;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.cols != cols {
                return Err(mismatch("concat_rows", self.shape(first), s));
            }
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Matrix {
                shape: Shape::new(rows, cols),
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if len == 0 || start + len > s.cols {
            return Err(invalid("slice_cols", format!("cols {start}..{} of {s}", start + len)));
        }
        let va = self.value(a);
        let mut out = Matrix::zeros(s.rows, len);
        for i in 0..s.rows {
            out.row_mut(i).copy_from_slice(&va.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if len == 0 || start + len > s.rows {
            return Err(invalid("slice_rows", format!("rows {start}..{} of {s}", start + len)));
        }
        let data = self.value(a).data[start * s.cols..(start + len) * s.cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Matrix {
                shape: Shape::new(len, s.cols),
                data,
            },
            Op::SliceRows(a, start),
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if ids.is_empty() {
            return Err(invalid("gather_rows", "no ids"));
        }
        if let Some(bad) = ids.iter().find(|i| **i >= s.rows) {
            return Err(invalid("gather_rows", format!("id {bad} out of range for {s}")));
        }
        let vt = self.value(table);
        let mut out = Matrix::zeros(ids.len(), s.cols);
        for (i, id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vt.row(*id));
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    // ---- reductions -------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m x n] -> [m x 1]`
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|i| va.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Matrix::column_vector(data), Op::RowSums(a), rg)
    }

    /// `[m x n] -> [1 x n]`
    pub fn col_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut data = vec![0.0; va.cols()];
        for i in 0..va.rows() {
            for (d, v) in data.iter_mut().zip(va.row(i)) {
                *d += v;
            }
        }
        let rg = self.rg(a);
        self.push(Matrix::row_vector(data), Op::ColSums(a), rg)
    }

    /// Column-wise max over rows, `[m x n] -> [1 x n]`.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut argmax = vec![0usize; cols];
        let mut data = va.row(0).to_vec();
        for i in 1..rows {
            for j in 0..cols {
                let v = va.data[i * cols + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Matrix::row_vector(data), Op::MaxCols(a, argmax), rg)
    }

    /// Winning row per column of a `max_cols` node.
    pub fn argmax_of(&self, pooled: Var) -> Option<&[usize]> {
        match &self.nodes[pooled.0].op {
            Op::MaxCols(_, argmax) => Some(argmax),
            _ => None,
        }
    }

    // ---- losses ---------------------------------------------------------------------

    /// `sum_i w_i * -log softmax(logits_i)[targets_i]`
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        if targets.len() != s.rows || weights.len() != s.rows {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets / {} weights for logits {s}", targets.len(), weights.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|t| **t >= s.cols) {
            return Err(invalid("cross_entropy", format!("target {bad} out of range for {s}")));
        }
        let vl = self.value(logits);
        let mut probs = vec![0.0; s.len()];
        let mut loss = 0.0;
        let mut lrow = vec![0.0; s.cols];
        for i in 0..s.rows {
            softmax_row(vl.row(i), &mut probs[i * s.cols..(i + 1) * s.cols]);
            if weights[i] != 0.0 {
                log_softmax_row(vl.row(i), &mut lrow);
                loss -= weights[i] * lrow[targets[i]];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `-sum p * log softmax(logits)`, summed over rows.
    pub fn cross_entropy_dist(&mut self, target: Var, logits: Var) -> Result<Var> {
        self.same_shape("cross_entropy_dist", target, logits)?;
        let lp = self.log_softmax(logits);
        let prod = self.mul(target, lp)?;
        let s = self.sum(prod);
        Ok(self.neg(s))
    }

    /// `sum (a - b)^2`
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    // ---- convolution windows ----------------------------------------------------

    /// `[T x E] -> [(T-w+1) x (w*E)]`; row `p` holds rows `p..p+w` side by side.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if width == 0 || width > s.rows {
            return Err(invalid("unfold", format!("width {width} for input {s}")));
        }
        let positions = s.rows - width + 1;
        let va = self.value(a);
        let mut out = Matrix::zeros(positions, width * s.cols);
        for p in 0..positions {
            out.row_mut(p)
                .copy_from_slice(&va.data[p * s.cols..(p + width) * s.cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unfold(a, width), rg))
    }

    /// Adjoint of [`Trace::unfold`]: overlapping windows are summed back
    /// onto their rows, `[P x (w*E)] -> [(P+w-1) x E]`.
    pub fn fold(&mut self, a: Var, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if width == 0 || s.cols % width != 0 {
            return Err(invalid("fold", format!("width {width} for input {s}")));
        }
        let e = s.cols / width;
        let rows = s.rows + width - 1;
        let va = self.value(a);
        let mut out = Matrix::zeros(rows, e);
        for p in 0..s.rows {
            let src = va.row(p);
            for (o, v) in out.data[p * e..(p + width) * e].iter_mut().zip(src) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Fold(a, width), rg))
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node on a differentiable path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s != Shape::SCALAR {
            return Err(TensorError::NotScalar(s));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_into(g, &vb.data, ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_into(&va.data, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let (r, c) = (y.cols(), y.rows());
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += g[q * r + p];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d * w;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((x, d), w) in gb.iter_mut().zip(g).zip(va) {
                        *x += d * w;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = &nodes[b.0].value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d / w;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (((x, d), w), q) in gb.iter_mut().zip(g).zip(vb).zip(&y.data) {
                        *x -= d * q / w;
                    }
                }
            }
            Op::AddRow(a, r) => {
                let cols = y.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gr) = slot(nodes, grads, *r) {
                    for (idx, d) in g.iter().enumerate() {
                        gr[idx % cols] += d;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let cols = y.cols();
                let (va, vr) = (&nodes[a.0].value.data, &nodes[r.0].value.data);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, (x, d)) in ga.iter_mut().zip(g).enumerate() {
                        *x += d * vr[idx % cols];
                    }
                }
                if let Some(gr) = slot(nodes, grads, *r) {
                    for (idx, d) in g.iter().enumerate() {
                        gr[idx % cols] += d * va[idx];
                    }
                }
            }
            Op::MulCol(a, c) => {
                let cols = y.cols();
                let (va, vc) = (&nodes[a.0].value.data, &nodes[c.0].value.data);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, (x, d)) in ga.iter_mut().zip(g).enumerate() {
                        *x += d * vc[idx / cols];
                    }
                }
                if let Some(gc) = slot(nodes, grads, *c) {
                    for (idx, d) in g.iter().enumerate() {
                        gc[idx / cols] += d * va[idx];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += k * d);
                }
            }
            Op::AddScalar(a) | Op::Stabilize(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), t) in ga.iter_mut().zip(g).zip(&y.data) {
                        *x += d * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), s) in ga.iter_mut().zip(g).zip(&y.data) {
                        *x += d * s * (1.0 - s);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), e) in ga.iter_mut().zip(g).zip(&y.data) {
                        *x += d * e;
                    }
                }
            }
            Op::Log(a) => {
                let va = &nodes[a.0].value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(va) {
                        *x += d / v;
                    }
                }
            }
            Op::Abs(a) => {
                let va = &nodes[a.0].value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += d;
                        } else if *v < 0.0 {
                            *x -= d;
                        }
                    }
                }
            }
            Op::Threshold(a, eps) => {
                let va = &nodes[a.0].value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v >= *eps {
                            *x += d;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &g[r * cols..(r + 1) * cols]);
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols = y.cols();
                let mut off = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for r in 0..y.rows() {
                            for j in 0..c {
                                gp[r * c + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.data.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, d)| *x += d);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = nodes[a.0].value.cols();
                let c = y.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for r in 0..y.rows() {
                        for j in 0..c {
                            ga[r * src_cols + start + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = y.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, d)| *x += d);
                }
            }
            Op::GatherRows(t, ids) => {
                let c = y.cols();
                if let Some(gt) = slot(nodes, grads, *t) {
                    for (r, id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::RowSums(a) => {
                let cols = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx / cols];
                    }
                }
            }
            Op::ColSums(a) => {
                let cols = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx % cols];
                    }
                }
            }
            Op::MaxCols(a, argmax) => {
                let cols = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (j, r) in argmax.iter().enumerate() {
                        ga[r * cols + j] += g[j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let cols = nodes[logits.0].value.cols();
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, (t, w)) in targets.iter().zip(weights).enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..cols {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            gl[r * cols + j] += scale * (probs[r * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::Unfold(a, width) => {
                let e = nodes[a.0].value.cols();
                let span = width * e;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for p in 0..y.rows() {
                        for (x, d) in ga[p * e..p * e + span]
                            .iter_mut()
                            .zip(&g[p * span..(p + 1) * span])
                        {
                            *x += d;
                        }
                    }
                }
            }
            Op::Fold(a, width) => {
                let e = y.cols();
                let span = width * e;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for p in 0..nodes[a.0].value.rows() {
                        for (x, d) in ga[p * span..(p + 1) * span]
                            .iter_mut()
                            .zip(&g[p * e..p * e + span])
                        {
                            *x += d;
                        }
                    }
                }
            }
        }
    }

    /// Adds this trace's parameter gradients into `store`. Frozen stores and
    /// pinned rows are left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        if store.is_frozen() {
            return;
        }
        let sid = store.id();
        for ((s, pid), var) in &self.params {
            if *s != sid {
                continue;
            }
            let Some(g) = self.grad(*var) else { continue };
            let param = store.param_mut(*pid);
            let cols = param.tensor.values.cols();
            let pinned = param.pinned_row;
            for (idx, (dst, src)) in param.tensor.grad.iter_mut().zip(g).enumerate() {
                if pinned == Some(idx / cols) {
                    continue;
                }
                *dst += src;
            }
        }
    }

    /// `backward` followed by `accumulate_into` for each store.
    pub fn backward_into(&mut self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        self.backward(loss)?;
        for s in stores.iter_mut() {
            self.accumulate_into(s);
        }
        Ok(())
    }
}

/// Row-wise softmax of a plain matrix, outside any trace.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_row(m.row(i), out.row_mut(i));
    }
    out
}
