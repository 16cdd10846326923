//! Dense row-major matrices and numerically stable primitives.
//!
//! All reductions run left to right in index order so results are
//! bit-reproducible across runs and execution strategies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as all-zero embeddings.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major values; rejects length mismatches and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite value at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm of the difference, for tests and diagnostics.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::degenerate(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalize every row, returning the normalized matrix and the original row norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::degenerate(n).with_context(format!("row {i}")));
        }
        for x in out.row_mut(i) {
            *x /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pull a gradient with respect to `v / |v|` back to `v`.
///
/// `unit` is the normalized vector and `norm` the norm of the original.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_unit);
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * proj) / norm).collect()
}

/// `A · Bᵀ`, i.e. entry (i, j) is `dot(A_i, B_j)`. Rows are expected to be unit-norm.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cosine_matrix: dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// Max-subtracted log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut acc = 0.0;
    for x in xs {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax_row(m: &Matrix, row: usize) -> Result<Vec<f64>> {
    if row >= m.rows() {
        return Err(Error::Shape(format!("row {row} out of bounds for {} rows", m.rows())));
    }
    Ok(log_softmax(m.row(row)))
}

/// Project mean-centred rows onto their top-2 principal directions.
///
/// Each direction's first non-negligible loading is made positive. Directions
/// with (relatively) zero variance are reported as zero vectors, so their
/// projection column is all zeros.
pub fn pca_project_2d(x: &Matrix) -> Result<Matrix> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);

    // Work in whichever of the covariance or Gram spaces is smaller.
    let (eigvals, dirs): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let cov = centred.transpose() * &centred;
        let eig = cov.symmetric_eigen();
        let vecs = (0..d)
            .map(|k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect();
        (eig.eigenvalues.iter().copied().collect(), vecs)
    } else {
        let gram = &centred * centred.transpose();
        let eig = gram.symmetric_eigen();
        let vecs = (0..n)
            .map(|k| {
                let u = eig.eigenvectors.column(k);
                let w = centred.transpose() * u;
                let wn = w.norm();
                if wn > 0.0 {
                    w.iter().map(|v| v / wn).collect()
                } else {
                    vec![0.0; d]
                }
            })
            .collect();
        (eig.eigenvalues.iter().copied().collect(), vecs)
    };

    let mut order: Vec<usize> = (0..eigvals.len()).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]).then(a.cmp(&b)));
    let top = eigvals.get(order[0]).copied().unwrap_or(0.0).max(0.0);

    let mut out = Matrix::zeros(n, 2);
    for (c, &k) in order.iter().take(2).enumerate() {
        let lambda = eigvals[k];
        if top <= f64::MIN_POSITIVE || lambda <= 1e-12 * top {
            continue;
        }
        let mut w = dirs[k].clone();
        let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(first) = w.iter().find(|v| v.abs() > 1e-9 * scale) {
            if *first < 0.0 {
                w.iter_mut().for_each(|v| *v = -*v);
            }
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centred[(i, j)] * w[j];
            }
            out[(i, c)] = acc;
        }
    }
    Ok(out)
}
