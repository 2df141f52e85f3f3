//! Dense f64 kernels shared by every other module.
//!
//! Everything here is a pure function over borrowed inputs. Feature files
//! store f32; values are widened to f64 on load and all arithmetic happens
//! in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are rejected by [`l2_normalize`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Tolerance on the sum of a [`ProbVector`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("matrix entry {i} is not finite")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "ragged rows: expected width {cols}, found {}",
                bad.len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(1, v.len(), v.to_vec())
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_error("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_error("matmul_transposed", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_error("transposed_matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn shape_error(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A discrete distribution: entries in `[0, 1]` summing to one.
///
/// Entries can reach exactly 0 or 1 when logits are far apart, since f64
/// `exp` underflows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        if entries.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numeric(format!(
                "probability entries outside [0, 1]: {entries:?}"
            )));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::Numeric(format!("probabilities sum to {sum}")));
        }
        Ok(Self(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("softmax input not finite: {v:?}")));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("cannot normalize an empty vector".into()));
    }
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::Numeric("vector norm is not finite".into()));
    }
    if n < DEGENERATE_NORM {
        return Err(Error::DegenerateVector {
            norm: n,
            threshold: DEGENERATE_NORM,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `x · w + b`, with `b` broadcast over the rows of the product.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::Dimension(format!(
            "affine: bias of length {} does not match weight {}x{}",
            b.len(),
            w.rows(),
            w.cols()
        )));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, &bias) in out.row_mut(r).iter_mut().zip(b) {
            *o += bias;
        }
    }
    Ok(out)
}

/// Single-row affine map: `x · w + b` for a vector `x`.
pub fn affine_vec(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.rows() {
        return Err(Error::Dimension(format!(
            "affine: input of length {} does not match weight {}x{}",
            x.len(),
            w.rows(),
            w.cols()
        )));
    }
    if b.len() != w.cols() {
        return Err(Error::Dimension(format!(
            "affine: bias of length {} does not match weight {}x{}",
            b.len(),
            w.rows(),
            w.cols()
        )));
    }
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    Ok(out)
}

/// Compares analytic gradients against central finite differences.
///
/// Returns the largest per-coordinate
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradient_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "gradient_check: {} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "gradient_check: eps {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let plus = loss_fn(&probe)?;
        probe[i] = params[i] - eps;
        let minus = loss_fn(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient_check: non-finite loss while probing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}
