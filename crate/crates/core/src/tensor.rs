//! A small dense tensor engine with reverse-mode differentiation.
//!
//! Values are row-major `f64` arrays. Operations are recorded on a [`Graph`]
//! (an append-only arena), so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Every op treats its inputs
//! as matrices: the last axis is the column axis and all leading axes are
//! folded into rows. Broadcasting is limited to adding or multiplying a
//! single row across all rows.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: range {start}..{end} out of bounds for extent {extent}")]
    OutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{0}: empty input list")]
    Empty(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() || shape.is_empty() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Xavier/Glorot uniform initialization for a `fan_in x fan_out` weight.
    pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Mse(Var, Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice",
            Op::SliceRows(..) => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Mse(..) => "mse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

// c[m x n] = a[m x k] * b[k x n]
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(value, op, requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Operation tag and parents of `v`; `None` for leaves and constant results.
    pub fn provenance(&self, v: Var) -> Option<(&'static str, Vec<Var>)> {
        let op = &self.nodes[v.0].op;
        let parents = match op {
            Op::Leaf => return None,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _) => vec![*a],
        };
        Some((op.tag(), parents))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() > 2 || tb.shape.len() != 2 || ta.cols() != tb.shape[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_kernel(&ta.data, &tb.data, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a single row (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data[i % c])
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.derived(value, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every row of `a` elementwise by `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(mismatch("mul_row", ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * tr.data[i % c])
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.derived(value, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * factor).collect(),
        };
        self.derived(value, Op::Scale(a, factor), &[a])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::Empty("concat"))?);
        let rows = first.rows();
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(mismatch("concat", first, t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data,
        };
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenation along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::Empty("concat_rows"))?);
        let cols = first.cols();
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", first, t));
            }
            data.extend_from_slice(&t.data);
        }
        let value = Tensor {
            shape: vec![data.len() / cols.max(1), cols],
            data,
        };
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of every row.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let c = ta.cols();
        if start >= end || end > c {
            return Err(TensorError::OutOfBounds {
                op: "slice",
                start,
                end,
                extent: c,
            });
        }
        let data = (0..ta.rows())
            .flat_map(|r| ta.row(r)[start..end].iter().copied())
            .collect();
        let value = Tensor {
            shape: vec![ta.rows(), end - start],
            data,
        };
        Ok(self.derived(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start >= end || end > r {
            return Err(TensorError::OutOfBounds {
                op: "slice_rows",
                start,
                end,
                extent: r,
            });
        }
        let value = Tensor {
            shape: vec![end - start, c],
            data: ta.data[start * c..end * c].to_vec(),
        };
        Ok(self.derived(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let value = Tensor {
            shape: vec![c, r],
            data: transpose_kernel(&ta.data, r, c),
        };
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() || shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: ta.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: ta.data.clone(),
        };
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.derived(value, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.derived(value, Op::Softmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let (mean, inv_std) = row_stats(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        }
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.derived(value, Op::LayerNorm(a, eps), &[a])
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape != tt.shape {
            return Err(mismatch("mse", tp, tt));
        }
        let sum: f64 = tp
            .data
            .iter()
            .zip(&tt.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / tp.len() as f64);
        Ok(self.derived(value, Op::Mse(pred, target), &[pred, target]))
    }

    /// Populates gradients of `loss` on every ancestor that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let root = self.value(loss);
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(data) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data,
                }),
                _ => None,
            };
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contribution)
                .for_each(|(e, c)| *e += c),
            slot => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(a) {
                    let bt = transpose_kernel(&tb.data, k, n);
                    self.accumulate(grads, a, matmul_kernel(g, &bt, m, n, k));
                }
                if self.requires_grad(b) {
                    let at = transpose_kernel(&ta.data, m, k);
                    self.accumulate(grads, b, matmul_kernel(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.to_vec());
                let c = out.cols();
                self.accumulate_with(grads, row, |dr| {
                    g.chunks(c)
                        .for_each(|gr| dr.iter_mut().zip(gr).for_each(|(d, x)| *d += x))
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.accumulate(
                    grads,
                    a,
                    g.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                );
                self.accumulate(
                    grads,
                    b,
                    g.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                );
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(a), self.value(row));
                let c = out.cols();
                self.accumulate(
                    grads,
                    a,
                    g.iter()
                        .enumerate()
                        .map(|(i, x)| x * tr.data[i % c])
                        .collect(),
                );
                self.accumulate_with(grads, row, |dr| {
                    for (i, (x, av)) in g.iter().zip(&ta.data).enumerate() {
                        dr[i % c] += x * av;
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, a, g.iter().map(|x| x * factor).collect());
            }
            Op::ConcatCols(ref parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate_with(grads, p, |dp| {
                        for (r, drow) in dp.chunks_mut(c).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            drow.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (c, w) = (self.value(a).cols(), out.cols());
                self.accumulate_with(grads, a, |da| {
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(w)) {
                        drow[start..start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                self.accumulate_with(grads, a, |da| {
                    da[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                self.accumulate(grads, a, transpose_kernel(g, r, c));
            }
            Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Relu(a) => {
                let ta = self.value(a);
                self.accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(&ta.data)
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut da = Vec::with_capacity(g.len());
                for (yrow, grow) in out.data.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, x)| y * x).sum();
                    da.extend(yrow.iter().zip(grow).map(|(y, x)| y * (x - dot)));
                }
                self.accumulate(grads, a, da);
            }
            Op::LayerNorm(a, eps) => {
                let ta = self.value(a);
                let c = out.cols();
                let mut da = Vec::with_capacity(g.len());
                for ((xrow, yrow), grow) in
                    ta.data.chunks(c).zip(out.data.chunks(c)).zip(g.chunks(c))
                {
                    let (_, inv_std) = row_stats(xrow, eps);
                    let n = c as f64;
                    let mean_g = grow.iter().sum::<f64>() / n;
                    let mean_gy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / n;
                    da.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(x, y)| inv_std * (x - mean_g - y * mean_gy)),
                    );
                }
                self.accumulate(grads, a, da);
            }
            Op::Mse(pred, target) => {
                let (tp, tt) = (self.value(pred), self.value(target));
                let scale = 2.0 * g[0] / tp.len() as f64;
                let diff: Vec<f64> = tp
                    .data
                    .iter()
                    .zip(&tt.data)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                if self.requires_grad(target) {
                    self.accumulate(grads, target, diff.iter().map(|d| -d).collect());
                }
                self.accumulate(grads, pred, diff);
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Compares the analytic gradient of scalar function `f` at `x` with central
/// differences of step `eps`, returning the largest elementwise relative error
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut graph = Graph::new();
    let input = graph.param(x.clone());
    let loss = f(&mut graph, input)?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(input)
        .map(|t| t.data.clone())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data[0])
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn sum_sq(g: &mut Graph, v: Var) -> Result<Var, TensorError> {
        let t = g.value(v);
        let zero = g.constant(Tensor::zeros(t.shape()));
        g.mse(v, zero)
    }

    #[test]
    fn matmul_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(&[2, 3], 1.0));
        let b = g.constant(Tensor::filled(&[3, 1], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            })
        );
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.add(a, c),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2]));
        let s = g.softmax(a);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_identical_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = g.mse(x, x).unwrap();
        assert_eq!(g.value(loss).data(), &[0.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_and_fan_out() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn untouched_tensors_have_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::scalar(5.0));
        let c = g.constant(Tensor::scalar(1.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(unused).is_none());
        assert!(g.grad(c).is_none());
        assert_eq!(g.provenance(y).unwrap().0, "mul");
        assert!(g.provenance(x).is_none());
    }

    #[test]
    fn constant_graph_records_no_provenance() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.relu(a);
        assert!(g.provenance(b).is_none());
        assert!(!g.requires_grad(b));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.constant(random(&[5, 16], &mut rng));
        let y = g.layer_norm(a, 1e-12);
        for row in g.value(y).to_rows() {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 3], &mut rng);
        let w1 = random(&[3, 5], &mut rng);
        let w2 = random(&[5, 5], &mut rng);
        let w3 = random(&[5, 2], &mut rng);
        let target = random(&[4, 2], &mut rng);
        let weights = [w1.clone(), w2.clone(), w3.clone()];
        for which in 0..3 {
            let f = |g: &mut Graph, v: Var| {
                let mut h = g.constant(x.clone());
                for (i, w) in weights.iter().enumerate() {
                    let wv = if i == which { v } else { g.constant(w.clone()) };
                    h = g.matmul(h, wv)?;
                    if i < 2 {
                        h = g.softmax(h);
                    }
                }
                let t = g.constant(target.clone());
                g.mse(h, t)
            };
            let err = grad_check(f, &weights[which], 1e-5).unwrap();
            assert!(err < 1e-4, "layer {which}: {err}");
        }
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[3, 4], &mut rng);
        let other = random(&[3, 4], &mut rng);
        let row = random(&[4], &mut rng);
        let right = random(&[4, 2], &mut rng);
        type Case<'a> = (
            &'a str,
            Box<dyn Fn(&mut Graph, Var) -> Result<Var, TensorError> + 'a>,
        );
        let cases: Vec<Case> = vec![
            (
                "matmul",
                Box::new(|g, v| {
                    let r = g.constant(right.clone());
                    let y = g.matmul(v, r)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "add",
                Box::new(|g, v| {
                    let o = g.constant(other.clone());
                    let y = g.add(v, o)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "mul",
                Box::new(|g, v| {
                    let o = g.constant(other.clone());
                    let y = g.mul(v, o)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "add_row",
                Box::new(|g, v| {
                    let r = g.constant(row.clone());
                    let y = g.add_row(v, r)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "mul_row",
                Box::new(|g, v| {
                    let r = g.constant(row.clone());
                    let y = g.mul_row(v, r)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "concat",
                Box::new(|g, v| {
                    let o = g.constant(other.clone());
                    let y = g.concat(&[o, v, v])?;
                    sum_sq(g, y)
                }),
            ),
            (
                "concat_rows",
                Box::new(|g, v| {
                    let o = g.constant(other.clone());
                    let y = g.concat_rows(&[v, o])?;
                    sum_sq(g, y)
                }),
            ),
            (
                "slice",
                Box::new(|g, v| {
                    let y = g.slice(v, 1, 3)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "slice_rows",
                Box::new(|g, v| {
                    let y = g.slice_rows(v, 1, 2)?;
                    sum_sq(g, y)
                }),
            ),
            (
                "transpose",
                Box::new(|g, v| {
                    let y = g.transpose(v);
                    let r = g.constant(random(&[3, 2], &mut ChaCha8Rng::seed_from_u64(1)));
                    let z = g.matmul(y, r)?;
                    sum_sq(g, z)
                }),
            ),
            (
                "reshape",
                Box::new(|g, v| {
                    let y = g.reshape(v, &[2, 6])?;
                    let w = g.constant(Tensor::filled(&[6, 1], 0.3));
                    let z = g.matmul(y, w)?;
                    sum_sq(g, z)
                }),
            ),
            (
                "relu",
                Box::new(|g, v| {
                    let y = g.relu(v);
                    sum_sq(g, y)
                }),
            ),
            (
                "softmax",
                Box::new(|g, v| {
                    let y = g.softmax(v);
                    let o = g.constant(other.clone());
                    g.mse(y, o)
                }),
            ),
            (
                "layer_norm",
                Box::new(|g, v| {
                    let y = g.layer_norm(v, 1e-5);
                    let o = g.constant(other.clone());
                    g.mse(y, o)
                }),
            ),
            (
                "scale",
                Box::new(|g, v| {
                    let y = g.scale(v, -1.7);
                    sum_sq(g, y)
                }),
            ),
            (
                "mse_target",
                Box::new(|g, v| {
                    let o = g.constant(other.clone());
                    g.mse(o, v)
                }),
            ),
        ];
        for (name, f) in cases {
            let err = grad_check(f, &a, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
