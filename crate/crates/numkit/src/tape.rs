//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its backward rule. `backward` replays the tape in reverse
//! and accumulates gradients into the leaves that requested them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    GatherElems {
        x: Var,
        coords: Vec<(usize, usize)>,
    },
    ScatterElems {
        x: Var,
        coords: Vec<(usize, usize)>,
    },
    SegmentSoftmax {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// A tape is confined to one thread; build one tape per example or per
/// worker and combine the resulting gradients outside.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// A tape whose dropout masks derive from `seed` and a per-call counter.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            dropout_seed: seed,
            dropout_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf value that participates in gradient computation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Shared parameter storage registered as a gradient-bearing leaf.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(NumError::InvalidShape {
                op,
                shape: t.shape().to_vec(),
                reason: "expected a matrix",
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NumError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Matrix product with the second operand transposed, `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(NumError::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = av.row(i);
            for j in 0..n {
                out.push(dot(ar, bv.row(j)));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims("transpose", x)?;
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::with_shape(av.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::with_shape(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).numel() != n {
            return Err(NumError::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.map(x, |v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, log_sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSigmoid(x), rg)
    }

    /// Row-wise softmax. `allowed[i]` false forces entry `i` to exactly zero.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(mask) = allowed {
            if mask.len() != xv.numel() {
                return Err(NumError::Shape {
                    op: "softmax_rows",
                    left: xv.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let mut out = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let keep = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumError::DegenerateRow {
                    op: "softmax_rows",
                    row: r,
                });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::with_shape(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let n = xv.cols();
        for chunk in out.data_mut().chunks_mut(n) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            chunk.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(NumError::Shape {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::with_shape(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// `train` is false or `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.dropout_seed ^ splitmix64(call)));
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::with_shape(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(NumError::Contract("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumError::Index {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::with_shape(vec![ids.len(), d], out);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if rows.is_empty() {
            return Err(NumError::Contract("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: r,
                    size: m,
                });
            }
            out.extend_from_slice(xv.row(r));
        }
        let out = Tensor::with_shape(vec![rows.len(), n], out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` of the result is row `i` of `a` when `take_a[i]`, else of `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if take_a.len() != av.rows() {
            return Err(NumError::Shape {
                op: "select_rows",
                left: av.shape().to_vec(),
                right: vec![take_a.len()],
            });
        }
        let mut out = Vec::with_capacity(av.numel());
        for (r, &t) in take_a.iter().enumerate() {
            out.extend_from_slice(if t { av.row(r) } else { bv.row(r) });
        }
        let out = Tensor::with_shape(av.shape().to_vec(), out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumError::Contract("concat of zero tensors".into()))?;
        let m = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::with_shape(vec![m, total], out);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(NumError::InvalidShape {
                op: "slice_cols",
                shape: xv.shape().to_vec(),
                reason: "column range out of bounds",
            });
        }
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::with_shape(vec![xv.rows(), end - start], out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Picks `x[r, c]` for each coordinate, producing a vector.
    pub fn gather_elems(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if coords.is_empty() {
            return Err(NumError::Contract("gather of zero elements".into()));
        }
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(NumError::Index {
                    op: "gather_elems",
                    index: r * n + c,
                    size: m * n,
                });
            }
            out.push(xv.get(r, c));
        }
        let out = Tensor::with_shape(vec![coords.len()], out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherElems {
                x,
                coords: coords.to_vec(),
            },
            rg,
        ))
    }

    /// Sums `x[e]` into a zero `rows×cols` matrix at `coords[e]`.
    pub fn scatter_elems(
        &mut self,
        x: Var,
        coords: &[(usize, usize)],
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != coords.len() {
            return Err(NumError::Shape {
                op: "scatter_elems",
                left: xv.shape().to_vec(),
                right: vec![coords.len()],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (&(r, c), v) in coords.iter().zip(xv.data()) {
            if r >= rows || c >= cols {
                return Err(NumError::Index {
                    op: "scatter_elems",
                    index: r * cols + c,
                    size: rows * cols,
                });
            }
            out[r * cols + c] += v;
        }
        let out = Tensor::with_shape(vec![rows, cols], out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterElems {
                x,
                coords: coords.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax within each half-open `segments` range of a vector. Segments
    /// must be non-empty and disjoint.
    pub fn segment_softmax(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = vec![0.0; xv.numel()];
        for (i, &(s, e)) in segments.iter().enumerate() {
            if s >= e || e > xv.numel() {
                return Err(NumError::DegenerateRow {
                    op: "segment_softmax",
                    row: i,
                });
            }
            let seg = &xv.data()[s..e];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = seg.iter().map(|v| (v - max).exp()).sum();
            for (o, v) in out[s..e].iter_mut().zip(seg) {
                *o = (v - max).exp() / total;
            }
        }
        let out = Tensor::with_shape(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` back to every gradient-bearing leaf.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor>> = Vec::new();
        local.resize_with(loss.0 + 1, || None);
        local[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut local);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Lazily allocated gradient buffer of an input.
        fn buf<'a>(local: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
            local[v.0].get_or_insert_with(|| Tensor::zeros(shape))
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let ga = buf(local, *a, av.shape());
                    for r in 0..m {
                        let gr = g.row(r);
                        let gar = ga.row_mut(r);
                        for (p, slot) in gar.iter_mut().enumerate().take(k) {
                            *slot += dot(gr, bv.row(p));
                        }
                    }
                }
                if wants(*b) {
                    let gb = buf(local, *b, bv.shape());
                    for r in 0..m {
                        let gr = g.row(r);
                        let ar = av.row(r);
                        for (p, &a) in ar.iter().enumerate().take(k) {
                            if a != 0.0 {
                                axpy(a, gr, &mut gb.data_mut()[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (av.rows(), bv.rows());
                if wants(*a) {
                    let ga = buf(local, *a, av.shape());
                    for r in 0..m {
                        let gar = ga.row_mut(r);
                        for j in 0..n {
                            let w = g.get(r, j);
                            if w != 0.0 {
                                axpy(w, bv.row(j), gar);
                            }
                        }
                    }
                }
                if wants(*b) {
                    let gb = buf(local, *b, bv.shape());
                    for r in 0..m {
                        let ar = av.row(r);
                        for j in 0..n {
                            let w = g.get(r, j);
                            if w != 0.0 {
                                axpy(w, ar, gb.row_mut(j));
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    buf(local, *x, val(*x).shape()).add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        buf(local, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    buf(local, *a, g.shape()).add_assign(g);
                }
                if wants(*b) {
                    let gb = buf(local, *b, g.shape());
                    axpy(-1.0, g.data(), gb.data_mut());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = buf(local, *a, av.shape());
                    for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * y;
                    }
                }
                if wants(*b) {
                    let gb = buf(local, *b, bv.shape());
                    for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    buf(local, *x, g.shape()).add_assign(g);
                }
                if wants(*row) {
                    let rv = val(*row);
                    let gr = buf(local, *row, rv.shape());
                    let n = rv.numel();
                    for chunk in g.data().chunks(n) {
                        axpy(1.0, chunk, gr.data_mut());
                    }
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    axpy(*f, g.data(), buf(local, *x, g.shape()).data_mut());
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let gx = buf(local, *x, xv.shape());
                    for ((o, gv), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let gx = buf(local, *x, out.shape());
                    for ((o, gv), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::LogSigmoid(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let gx = buf(local, *x, xv.shape());
                    for ((o, gv), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gv * sigmoid(-v);
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let n = out.cols();
                    let gx = buf(local, *x, out.shape());
                    for r in 0..out.rows() {
                        let (y, gy) = (out.row(r), g.row(r));
                        let s = dot(y, gy);
                        let o = &mut gx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            o[j] += y[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if wants(*x) {
                    let n = out.cols();
                    let gx = buf(local, *x, out.shape());
                    for r in 0..out.rows() {
                        let (y, gy) = (out.row(r), g.row(r));
                        let s: f64 = gy.iter().sum();
                        let o = &mut gx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            o[j] += gy[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let rows = out.rows();
                if wants(*gain) {
                    let gg = buf(local, *gain, val(*gain).shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        for j in 0..n {
                            gg.data_mut()[j] += gr[j] * xhat[r * n + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = buf(local, *bias, val(*bias).shape());
                    for chunk in g.data().chunks(n) {
                        axpy(1.0, chunk, gb.data_mut());
                    }
                }
                if wants(*x) {
                    let gain_v = val(*gain).data();
                    let gx = buf(local, *x, out.shape());
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gain_v[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xh);
                        let k = inv_std[r] / n as f64;
                        let o = &mut gx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            o[j] += k * (n as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let gx = buf(local, *x, g.shape());
                    for ((o, gv), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let tv = val(*table);
                    let gt = buf(local, *table, tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), gt.row_mut(id));
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(*x) {
                    let gx = buf(local, *x, val(*x).shape());
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(1.0, g.row(r), gx.row_mut(src));
                    }
                }
            }
            Op::SelectRows { a, b, take_a } => {
                for (v, want_a) in [(*a, true), (*b, false)] {
                    if wants(v) {
                        let gv = buf(local, v, g.shape());
                        for (r, &t) in take_a.iter().enumerate() {
                            if t == want_a {
                                axpy(1.0, g.row(r), gv.row_mut(r));
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if wants(p) {
                        let gp = buf(local, p, pv.shape());
                        for r in 0..g.rows() {
                            axpy(1.0, &g.row(r)[offset..offset + w], gp.row_mut(r));
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let w = g.cols();
                    let gx = buf(local, *x, val(*x).shape());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), &mut gx.row_mut(r)[*start..*start + w]);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let s = g.data()[0];
                    let gx = buf(local, *x, val(*x).shape());
                    gx.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::GatherElems { x, coords } => {
                if wants(*x) {
                    let xv = val(*x);
                    let n = xv.cols();
                    let gx = buf(local, *x, xv.shape());
                    for (&(r, c), gv) in coords.iter().zip(g.data()) {
                        gx.data_mut()[r * n + c] += gv;
                    }
                }
            }
            Op::ScatterElems { x, coords } => {
                if wants(*x) {
                    let n = g.cols();
                    let gx = buf(local, *x, val(*x).shape());
                    for (o, &(r, c)) in gx.data_mut().iter_mut().zip(coords) {
                        *o += g.data()[r * n + c];
                    }
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                if wants(*x) {
                    let gx = buf(local, *x, out.shape());
                    for &(s, e) in segments {
                        let (y, gy) = (&out.data()[s..e], &g.data()[s..e]);
                        let sdot = dot(y, gy);
                        for (k, o) in gx.data_mut()[s..e].iter_mut().enumerate() {
                            *o += y[k] * (gy[k] - sdot);
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let z = t.matmul(i, m).unwrap();
        assert_eq!(t.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_value_and_grad() {
        let mut t = Tape::new();
        let a = t.leaf(mat(&[vec![1.0, 2.0]]));
        let b = t.leaf(mat(&[vec![3.0], vec![4.0]]));
        let z = t.matmul(a, b).unwrap();
        assert_eq!(t.value(z).data(), &[11.0]);
        let s = t.sum(z);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(t.matmul(a, b), Err(NumError::Shape { .. })));
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
        let y = t.softmax_rows(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);

        let x = t.constant(mat(&[vec![1.0, 2.0, 3.0]]));
        let y = t.softmax_rows(x, None).unwrap();
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (v, e) in t.value(y).data().iter().zip(expect) {
            assert_relative_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_mask_and_degenerate_row() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![5.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]]));
        let allowed = [true, false, true, false, false, false];
        assert!(matches!(
            t.softmax_rows(x, Some(&allowed)),
            Err(NumError::DegenerateRow { row: 1, .. })
        ));
        let allowed = [true, false, true, false, true, false];
        let y = t.softmax_rows(x, Some(&allowed)).unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.row(1), &[0.0, 1.0, 0.0]);
        assert_relative_eq!(v.row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[0.5]);
        let d = t.dropout(x, 0.1, false).unwrap();
        assert_eq!(d, x);
        assert!(matches!(t.dropout(x, 1.0, true), Err(NumError::Config(_))));
        assert!(matches!(t.dropout(x, -0.1, false), Err(NumError::Config(_))));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut t = Tape::with_seed(7);
        let x = t.constant(Tensor::full(&[1000], 1.0));
        let y = t.dropout(x, 0.25, true).unwrap();
        let v = t.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12));
        let zeros = v.data().iter().filter(|&&e| e == 0.0).count();
        assert!((180..320).contains(&zeros), "{zeros}");
    }

    #[test]
    fn dropout_is_reproducible_per_seed() {
        let run = |seed| {
            let mut t = Tape::with_seed(seed);
            let x = t.constant(Tensor::full(&[64], 1.0));
            let a = t.dropout(x, 0.5, true).unwrap();
            let b = t.dropout(x, 0.5, true).unwrap();
            (t.value(a).clone(), t.value(b).clone())
        };
        assert_eq!(run(3), run(3));
        let (a, b) = run(3);
        assert_ne!(a, b, "successive calls draw fresh masks");
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_and_resets() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(NumError::Contract(_))));
    }

    #[test]
    fn embedding_out_of_range() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            t.embedding(table, &[1, 4]),
            Err(NumError::Index { index: 4, size: 4, .. })
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_relative_eq!(log_sigmoid(0.0), -(2.0f64).ln(), epsilon = 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), -0.0);
        assert_relative_eq!(sigmoid(-800.0), 0.0);
    }
}
