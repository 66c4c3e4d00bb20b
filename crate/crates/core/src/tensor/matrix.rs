//! Dense row-major `f64` matrices and the small set of kernels the encoder,
//! denoiser and editor share. The gradient tape calls the same kernels so
//! that taped and plain forward passes agree bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    /// Checked constructor: rejects length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for kernel outputs. Panics on a length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    /// A single-column matrix.
    pub fn col_vector(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// Stacks equal-length vectors as columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch("ragged columns".into()));
        }
        Ok(Self::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    /// Stacks equal-length vectors as rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self::from_vec(rows.len(), cols, rows.concat()))
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Self) -> Self {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_vec(n, m, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.matmul_t_unchecked(other))
    }

    pub(crate) fn matmul_t_unchecked(&self, other: &Self) -> Self {
        let (n, m) = (self.rows, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out[i * m + j] = dot(a, other.row(j));
            }
        }
        Self::from_vec(n, m, out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.t_matmul_unchecked(other))
    }

    pub(crate) fn t_matmul_unchecked(&self, other: &Self) -> Self {
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_vec(n, m, out)
    }

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::DimensionMismatch(format!(
                "matvec {:?} x {}",
                self.shape(),
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row_broadcast(&self, bias: &[f64]) -> Self {
        assert_eq!(bias.len(), self.cols, "bias length");
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Symmetric within `tol` relative to the largest entry.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Horizontal slice `[.., start..start+len]`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column slice out of range");
        Self::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Self {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat row count");
                data.extend_from_slice(p.row(i));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Self]) -> Self {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "concat column count");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self::from_vec(rows, cols, data)
    }

    /// Lower-triangular Cholesky factor `L` with `L·Lᵀ = self`.
    pub fn cholesky(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch(format!("cholesky of {:?}", self.shape())));
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(l)
    }
}

/// Solves `A·X = B` for symmetric positive-definite `A` by Cholesky
/// factorization and two triangular solves.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols || a.rows != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "solve_spd A {:?}, B {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.is_symmetric(1e-9) {
        return Err(Error::DimensionMismatch("solve_spd requires a symmetric matrix".into()));
    }
    let l = a.cholesky()?;
    let n = a.rows;
    let m = b.cols;
    let mut x = b.clone();
    // Forward substitution L·Y = B.
    for j in 0..m {
        for i in 0..n {
            let mut s = x.get(i, j);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, j);
            }
            x.set(i, j, s / l.get(i, i));
        }
    }
    // Back substitution Lᵀ·X = Y.
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = x.get(i, j);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, j);
            }
            x.set(i, j, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// Least-squares solution of `A·X ≈ B` by Householder QR, for `A` with at
/// least as many rows as columns and full column rank.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (m, n) = a.shape();
    if m < n || b.rows != m {
        return Err(Error::DimensionMismatch(format!("lstsq A {:?}, B {:?}", a.shape(), b.shape())));
    }
    let mut r = a.clone();
    let mut y = b.clone();
    for j in 0..n {
        let norm = (j..m).map(|i| r.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::NotPositiveDefinite { index: j, pivot: 0.0 });
        }
        let alpha = if r.get(j, j) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| r.get(i, j)).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        let reflect = |mat: &mut Matrix| {
            for c in 0..mat.cols {
                let s: f64 = v.iter().enumerate().map(|(k, vk)| vk * mat.get(j + k, c)).sum();
                let f = 2.0 * s / vv;
                for (k, vk) in v.iter().enumerate() {
                    let cur = mat.get(j + k, c);
                    mat.set(j + k, c, cur - f * vk);
                }
            }
        };
        reflect(&mut r);
        reflect(&mut y);
    }
    let k = b.cols;
    let mut x = Matrix::zeros(n, k);
    for c in 0..k {
        for i in (0..n).rev() {
            let mut s = y.get(i, c);
            for t in (i + 1)..n {
                s -= r.get(i, t) * x.get(t, c);
            }
            let d = r.get(i, i);
            if d == 0.0 {
                return Err(Error::NotPositiveDefinite { index: i, pivot: 0.0 });
            }
            x.set(i, c, s / d);
        }
    }
    Ok(x)
}

/// Condition-number estimate of an SPD matrix from its Cholesky diagonal.
pub fn spd_condition_estimate(a: &Matrix) -> Result<f64> {
    let l = a.cholesky()?;
    let diag: Vec<f64> = (0..l.rows).map(|i| l.get(i, i)).collect();
    let max = diag.iter().cloned().fold(f64::MIN, f64::max);
    let min = diag.iter().cloned().fold(f64::MAX, f64::min);
    Ok((max / min).powi(2))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row-wise layer norm. Returns the output plus per-row normalized inputs and
/// inverse standard deviations, which the backward passes reuse.
pub fn layer_norm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols;
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut out = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat.set(i, j, h);
            out.set(i, j, h * gain[j] + bias[j]);
        }
    }
    (out, xhat, inv_std)
}

/// Backward of [`layer_norm_rows`]: returns (dx, dgain, dbias).
pub fn layer_norm_rows_backward(
    dy: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gain: &[f64],
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for i in 0..dy.rows {
        let g = dy.row(i);
        let h = xhat.row(i);
        let mut dh = vec![0.0; d];
        for j in 0..d {
            dgain[j] += g[j] * h[j];
            dbias[j] += g[j];
            dh[j] = g[j] * gain[j];
        }
        let mean_dh = dh.iter().sum::<f64>() / d as f64;
        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx.set(i, j, inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dh_h));
        }
    }
    (dx, dgain, dbias)
}

/// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
pub fn softmax_rows(x: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let limit = if causal { (i + 1).min(x.cols) } else { x.cols };
        let row = &x.row(i)[..limit];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    out
}

/// Backward of [`softmax_rows`] given the forward output.
pub fn softmax_rows_backward(dy: &Matrix, y: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows, y.cols);
    for i in 0..y.rows {
        let yr = y.row(i);
        let gr = dy.row(i);
        let s = dot(yr, gr);
        for j in 0..y.cols {
            dx.set(i, j, yr[j] * (gr[j] - s));
        }
    }
    dx
}
