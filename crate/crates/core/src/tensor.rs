//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! A [`Tape`] records every operation applied to the [`Var`] handles it hands
//! out. Node values are computed eagerly; [`Tape::backward`] walks the record
//! in reverse once and returns the populated [`Gradients`].
//!
//! Broadcasting is deliberately narrow: a scalar operand, or a single row
//! applied to every row of a matrix.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use thiserror::Error;

use crate::rng;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(&'static str),
}

fn dim_err(msg: impl Into<String>) -> TensorError {
    TensorError::Dimension(msg.into())
}

/// Row-major dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(dim_err("zero-sized dimension"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(alloc::format!("shape {:?} needs {} values, got {}", shape, expected, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: Scalar) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<Scalar>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equally long rows into a matrix.
    pub fn from_rows(rows: &[Vec<Scalar>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(alloc::format!("expected a matrix, got shape {:?}", s))),
        }
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Scalar] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err("reshape changes element count"));
        }
        self.shape = shape;
        Ok(self)
    }

    fn same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(dim_err(alloc::format!("shape mismatch {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &[Scalar]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += *b;
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err(alloc::format!("matmul inner dimensions {} and {} differ", k, k2)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }
}

/// `out += a[m×k] · b[k×n]`
fn matmul_into(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
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

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn matmul_bt_into(g: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_at_into(a: &[Scalar], g: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn dot(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Splits a shape around `axis` into `(outer, len, inner)` strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(dim_err(alloc::format!("axis {} invalid for rank {}", axis, shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const INV_SQRT_2: Scalar = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: Scalar = 0.398_942_280_401_432_7;

fn gelu(x: Scalar) -> Scalar {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: Scalar) -> Scalar {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary pointwise operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Sub,
    Mul,
}

/// Identifies one dropout application: the run seed, which layer, which step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Pointwise, Var, Var),
    AddScalar(Var),
    MulScalar(Var, Scalar),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<Scalar>),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, axis: usize, inv_std: Vec<Scalar> },
    Gelu(Var),
    Relu(Var),
    Dropout { input: Var, mask: Vec<Scalar> },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<Scalar> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Like [`Tape::leaf`] without copying the tensor.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Like [`Tape::constant`] without copying the tensor.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn pointwise(&mut self, op: Pointwise, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y)?;
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(p, q)| match op {
                Pointwise::Add => p + q,
                Pointwise::Sub => p - q,
                Pointwise::Mul => p * q,
            })
            .collect();
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.pointwise(Pointwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.pointwise(Pointwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.pointwise(Pointwise::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: Scalar) -> Var {
        let x = self.value(a);
        let out = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v + s).collect() };
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Scalar) -> Var {
        let x = self.value(a);
        let out = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v * s).collect() };
        let rg = self.rg(a);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    fn row_broadcast(&self, a: Var, row: Var) -> Result<(usize, usize), TensorError> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(row).len() != n {
            return Err(dim_err(alloc::format!(
                "row operand has {} values, matrix has {} columns",
                self.value(row).len(),
                n
            )));
        }
        Ok((m, n))
    }

    /// `a[m×n] + row[n]` applied to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (_, n) = self.row_broadcast(a, row)?;
        let r = &self.value(row).data;
        let x = self.value(a);
        let data = x.data.iter().enumerate().map(|(i, v)| v + r[i % n]).collect();
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a[m×n] ⊙ row[n]` applied to every row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (_, n) = self.row_broadcast(a, row)?;
        let r = &self.value(row).data;
        let x = self.value(a);
        let data = x.data.iter().enumerate().map(|(i, v)| v * r[i % n]).collect();
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// Multiplies row `i` of a matrix by the constant `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<Scalar>) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2()?;
        if scales.len() != m {
            return Err(dim_err("one scale per row required"));
        }
        let x = self.value(a);
        let data = x.data.iter().enumerate().map(|(i, v)| v * scales[i / n]).collect();
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScaleRows(a, scales), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(&x.shape, axis)?;
        let mut data = x.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[idx(j)]).fold(Scalar::NEG_INFINITY, Scalar::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = if data[idx(j)] == Scalar::NEG_INFINITY { 0.0 } else { libm::exp(data[idx(j)] - max) };
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { input: a, axis }, rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: Scalar) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(&x.shape, axis)?;
        let mut data = x.data.clone();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| data[idx(j)]).sum::<Scalar>() / len as Scalar;
                let var = (0..len)
                    .map(|j| {
                        let c = data[idx(j)] - mean;
                        c * c
                    })
                    .sum::<Scalar>()
                    / len as Scalar;
                let r = 1.0 / libm::sqrt(var + eps);
                for j in 0..len {
                    data[idx(j)] = (data[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a);
        Ok(self.push(out, Op::LayerNorm { input: a, axis, inv_std }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| gelu(v)).collect() };
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() };
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: Scalar, key: DropoutKey, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract("dropout rate must lie in [0, 1)"));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = rng::stream(key.seed, key.layer, key.step);
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<Scalar> = (0..x.len()).map(|_| if rng.random::<Scalar>() < rate { 0.0 } else { keep }).collect();
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor { shape: x.shape.clone(), data };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { input: a, mask }, rg))
    }

    /// Selects rows of a matrix; repeated ids are allowed.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, len: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor { shape: vec![ids.len(), d], data };
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract("concat of nothing"))?;
        let m = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(dim_err("concat_cols row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape: vec![m, total], data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract("concat of nothing"))?;
        let n = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(dim_err("concat_rows column counts differ"));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape: vec![rows, n], data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<Scalar>() / x.len() as Scalar;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(logits);
        let (m, n) = x.dims2()?;
        if targets.len() != m {
            return Err(dim_err("one target per logit row required"));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::Index { index: t, len: n });
            }
            let row = x.row(i);
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let total: Scalar = row.iter().map(|v| libm::exp(v - max)).sum();
            let log_z = max + libm::log(total);
            loss += log_z - row[t];
            probs.extend(row.iter().map(|v| libm::exp(v - log_z)));
        }
        let out = Tensor::scalar(loss / m as Scalar);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::Contract("backward already ran on this tape"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract("backward needs a scalar loss"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor { shape: self.value(loss).shape.clone(), data: vec![1.0] });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut accumulate = |v: Var, delta: &[Scalar]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&nodes[v.0].value.shape));
            slot.add_assign(delta);
        };
        let gd = &g.data;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(gd, &bv.data, &mut da, m, k, n);
                    accumulate(*a, &da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(&av.data, gd, &mut db, m, k, n);
                    accumulate(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose().expect("matrix gradient");
                accumulate(*a, &t.data);
            }
            Op::Binary(op, a, b) => match op {
                Pointwise::Add => {
                    accumulate(*a, gd);
                    accumulate(*b, gd);
                }
                Pointwise::Sub => {
                    accumulate(*a, gd);
                    let neg: Vec<Scalar> = gd.iter().map(|v| -v).collect();
                    accumulate(*b, &neg);
                }
                Pointwise::Mul => {
                    let (x, y) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                    let da: Vec<Scalar> = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                    let db: Vec<Scalar> = gd.iter().zip(x).map(|(g, x)| g * x).collect();
                    accumulate(*a, &da);
                    accumulate(*b, &db);
                }
            },
            Op::AddScalar(a) => accumulate(*a, gd),
            Op::MulScalar(a, s) => {
                let d: Vec<Scalar> = gd.iter().map(|v| v * s).collect();
                accumulate(*a, &d);
            }
            Op::AddRow(a, row) => {
                accumulate(*a, gd);
                let n = nodes[row.0].value.len();
                let mut dr = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    dr[i % n] += v;
                }
                accumulate(*row, &dr);
            }
            Op::MulRow(a, row) => {
                let r = &nodes[row.0].value.data;
                let x = &nodes[a.0].value.data;
                let n = r.len();
                let da: Vec<Scalar> = gd.iter().enumerate().map(|(i, v)| v * r[i % n]).collect();
                let mut dr = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    dr[i % n] += v * x[i];
                }
                accumulate(*a, &da);
                accumulate(*row, &dr);
            }
            Op::ScaleRows(a, scales) => {
                let n = g.cols();
                let d: Vec<Scalar> = gd.iter().enumerate().map(|(i, v)| v * scales[i / n]).collect();
                accumulate(*a, &d);
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&y.shape, *axis).expect("recorded axis");
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: Scalar = (0..len).map(|j| gd[idx(j)] * y.data[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y.data[idx(j)] * (gd[idx(j)] - s);
                        }
                    }
                }
                accumulate(*input, &d);
            }
            Op::LayerNorm { input, axis, inv_std } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&y.shape, *axis).expect("recorded axis");
                let mut d = vec![0.0; y.len()];
                let nf = len as Scalar;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let r = inv_std[o * inner + i];
                        let mean_g: Scalar = (0..len).map(|j| gd[idx(j)]).sum::<Scalar>() / nf;
                        let mean_gy: Scalar = (0..len).map(|j| gd[idx(j)] * y.data[idx(j)]).sum::<Scalar>() / nf;
                        for j in 0..len {
                            d[idx(j)] = r * (gd[idx(j)] - mean_g - y.data[idx(j)] * mean_gy);
                        }
                    }
                }
                accumulate(*input, &d);
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value.data;
                let d: Vec<Scalar> = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(*a, &d);
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value.data;
                let d: Vec<Scalar> = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(*a, &d);
            }
            Op::Dropout { input, mask } => {
                let d: Vec<Scalar> = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(*input, &d);
            }
            Op::GatherRows { table, ids } => {
                let t = &nodes[table.0].value;
                let cols = t.cols();
                let mut d = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        d[id * cols + c] += gd[r * cols + c];
                    }
                }
                accumulate(*table, &d);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(*p, &d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    accumulate(*p, &gd[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let d = vec![gd[0]; nodes[a.0].value.len()];
                accumulate(*a, &d);
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                let d = vec![gd[0] / n as Scalar; n];
                accumulate(*a, &d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = nodes[logits.0].value.cols();
                let scale = gd[0] / targets.len() as Scalar;
                let mut d: Vec<Scalar> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= scale;
                }
                accumulate(*logits, &d);
            }
        }
    }
}

/// Central finite-difference check of a tape-built scalar function.
///
/// `build` receives fresh leaves for `inputs` and must return a scalar.
/// Returns the largest per-input relative error
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn gradient_check<F>(inputs: &[Tensor], step: Scalar, build: F) -> Result<Scalar, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<Scalar, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: Scalar = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map_or_else(|| vec![0.0; input.len()], |t| t.data.clone());
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let orig = probe[k].data[j];
            probe[k].data[j] = orig + step;
            let up = eval(&probe)?;
            probe[k].data[j] = orig - step;
            let down = eval(&probe)?;
            probe[k].data[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Gradient norms below this are compared absolutely; finite differences
/// cannot resolve anything smaller.
pub const GRADIENT_FLOOR: Scalar = 1e-7;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRADIENT_FLOOR)`.
pub fn relative_error(a: &[Scalar], b: &[Scalar]) -> Scalar {
    let norm = |v: &mut dyn Iterator<Item = Scalar>| libm::sqrt(v.map(|x| x * x).sum());
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    diff / scale.max(GRADIENT_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(rows, cols, rng::normal_vec(&mut r, rows * cols)).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(id.matmul(&m).unwrap(), m);
        let ones = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(m.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        let bad = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        assert!(matches!(m.matmul(&bad), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn pointwise_identities() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(2, 3, 1));
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let one = tape.constant(Tensor::full(&[2, 3], 1.0));
        let s = tape.add(x, zero).unwrap();
        let p = tape.mul(x, one).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        assert_eq!(tape.value(p), tape.value(x));
        let wrong = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(x, wrong).is_err());
    }

    #[test]
    fn power_rule_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let x0 = randn(3, 2, 5);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.mul_scalar(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), x0.data());
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(2, 2, 3));
        assert_eq!(tape.backward(x).err(), Some(TensorError::Contract("backward needs a scalar loss")));
        let mut tape = Tape::new();
        let x = tape.leaf(randn(2, 2, 3));
        let c = tape.constant(randn(2, 2, 4));
        let prod = tape.mul(x, c).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none(), "constants receive no gradient");
        assert_eq!(g.get(x).unwrap().shape(), &[2, 2]);
        assert!(tape.backward(s).is_err(), "second backward is rejected");
    }

    #[test]
    fn softmax_rows_and_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 0.7));
        let y = tape.softmax(x, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let r = tape.constant(randn(5, 7, 9));
        let y = tape.softmax(r, 1).unwrap();
        for i in 0..5 {
            let s: Scalar = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(tape.softmax(r, 2), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(randn(4, 16, 2));
        let y = tape.layer_norm(x, 1, 0.0).unwrap();
        for i in 0..4 {
            let row = tape.value(y).row(i);
            let mean: Scalar = row.iter().sum::<Scalar>() / 16.0;
            let var: Scalar = row.iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
        assert!(tape.layer_norm(x, 3, 1e-5).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_reproducibility() {
        let key = DropoutKey { seed: 1, layer: 2, step: 3 };
        let mut tape = Tape::new();
        let x = tape.leaf(randn(3, 3, 1));
        assert_eq!(tape.dropout(x, 0.0, key, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, key, false).unwrap(), x);
        let a = tape.dropout(x, 0.5, key, true).unwrap();
        let b = tape.dropout(x, 0.5, key, true).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.dropout(x, 1.0, key, true).is_err());
    }

    #[test]
    fn gather_rows_cases() {
        let table = randn(4, 3, 11);
        let mut tape = Tape::new();
        let t = tape.leaf(table.clone());
        let first = tape.gather_rows(t, &[0]).unwrap();
        assert_eq!(tape.value(first).data(), table.row(0));
        assert_eq!(tape.gather_rows(t, &[4]).err(), Some(TensorError::Index { index: 4, len: 4 }));

        let twice = tape.gather_rows(t, &[2, 2]).unwrap();
        let s = tape.sum(twice);
        let g = tape.backward(s).unwrap();
        let gt = g.get(t).unwrap();
        assert!(gt.row(2).iter().all(|&v| v == 2.0));
        assert!(gt.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_singleton_and_uniform() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let l = tape.cross_entropy(one, &[0]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-15);
        let two = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(two, &[1]).unwrap();
        assert!((tape.value(l).data()[0] - core::f64::consts::LN_2).abs() < 1e-15);
    }
}
