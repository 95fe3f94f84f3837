//! Dense row-major tensors and the forward kernels shared by the tape.
//!
//! Rank-1 tensors are treated as a single row wherever a matrix view is
//! needed, and row-wise kernels preserve the input rank.

use crate::error::{CcaError, Result};

/// Rows with a Euclidean norm at or below this are left as all-zero by
/// [`l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(CcaError::contract(format!("tensor dims must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(CcaError::Shape {
                op: "tensor",
                left: dims,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    /// Panics if `data.len() != rows * cols`; use [`Tensor::new`] for untrusted input.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Tensor {
            dims: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CcaError::contract("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// `(rows, cols)` of the matrix view; rank-1 is one row, higher ranks fold
    /// leading dims into rows.
    pub fn shape2(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [lead @ .., last] => (lead.iter().product(), *last),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape2().0
    }

    pub fn cols(&self) -> usize {
        self.shape2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_len(op, self, other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_len("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `start..end` of the matrix view as a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.shape2();
        if start >= end || end > r {
            return Err(CcaError::contract(format!("row slice {start}..{end} of {r} rows")));
        }
        Ok(Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec()))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.shape2();
        if start >= end || end > c {
            return Err(CcaError::contract(format!("column slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor::matrix(r, w, out))
    }

    /// Rounds every entry through `f32`, the on-disk precision.
    pub fn round_to_f32(&self) -> Tensor {
        self.map(|x| x as f32 as f64)
    }
}

fn same_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.data.len() != b.data.len() {
        return Err(CcaError::Shape {
            op,
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    Ok(())
}

/// `op(a) · op(b)` where `op` optionally transposes the matrix view.
/// Sequential and deterministic; backed by a blocked dgemm kernel.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.shape2();
    let (br, bc) = b.shape2();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(CcaError::Shape {
            op: "matmul",
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: strides describe the exact extents of `a.data` and `b.data`
    // checked above; `out` is an m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Matrix product. A rank-1 left operand is a single row and yields a rank-1 result.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = gemm(a, false, b, false)?;
    if a.rank() == 1 {
        out.dims = vec![out.cols()];
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
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

/// Per-row standardization followed by the affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.0)
}

/// Returns `(output, standardized rows, per-row 1/std)`; the latter two feed
/// the backward pass.
pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(CcaError::Shape {
            op: "layer_norm",
            left: x.dims.clone(),
            right: gain.dims.clone(),
        });
    }
    if eps <= 0.0 {
        return Err(CcaError::contract("layer_norm eps must be positive"));
    }
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in xhat.data.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let mut out = xhat.clone();
    for row in out.data.chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Ok((out, xhat, inv_std))
}

/// Scales each row to unit Euclidean norm; rows with norm ≤ [`NORM_FLOOR`]
/// come back as zeros.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    l2_normalize_parts(x).0
}

pub(crate) fn l2_normalize_parts(x: &Tensor) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for row in out.data.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > NORM_FLOOR {
            for v in row.iter_mut() {
                *v /= n;
            }
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        norms.push(n);
    }
    (out, norms)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts
        .first()
        .map(|t| t.cols())
        .ok_or_else(|| CcaError::contract("concat of nothing"))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        if t.cols() != c {
            return Err(CcaError::Shape {
                op: "concat_rows",
                left: parts[0].dims.clone(),
                right: t.dims.clone(),
            });
        }
        rows += t.rows();
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor::matrix(rows, c, data))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts
        .first()
        .map(|t| t.rows())
        .ok_or_else(|| CcaError::contract("concat of nothing"))?;
    if let Some(bad) = parts.iter().find(|t| t.rows() != r) {
        return Err(CcaError::Shape {
            op: "concat_cols",
            left: parts[0].dims.clone(),
            right: bad.dims.clone(),
        });
    }
    let total: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for t in parts {
            data.extend_from_slice(t.row(i));
        }
    }
    Ok(Tensor::matrix(r, total, data))
}

/// Adds a length-`cols` bias to every row.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if bias.len() != c {
        return Err(CcaError::Shape {
            op: "add_row",
            left: x.dims.clone(),
            right: bias.dims.clone(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}
