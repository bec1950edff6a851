//! Small dense FP64 linear algebra used by the low-rank mergers.

mod jacobi;
mod randomized;

pub use jacobi::jacobi_svd;
pub use randomized::randomized_svd;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::Tensor;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.matrix_dims().ok_or_else(|| Error::NotAMatrix {
            tensor: name.to_string(),
            shape: t.shape().to_vec(),
        })?;
        Ok(Self::from_vec(rows, cols, t.data().iter().map(|&x| x as f64).collect()))
    }

    /// Round to FP32, keeping the shape and source dtype of `like`.
    pub fn to_tensor(&self, like: &Tensor) -> Tensor {
        like.like(self.data.iter().map(|&x| x as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        });
        Matrix::from_vec(self.rows, n, out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "row counts differ");
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for k in 0..self.rows {
                let a = self.get(k, i);
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        });
        Matrix::from_vec(m, n, out)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Thin SVD `A ≈ U diag(S) Vᵀ` with `S` positive and non-increasing.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    pub s: Vec<f64>,
    /// n×r, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keep the leading `r` triplets.
    pub fn truncate(mut self, r: usize) -> Self {
        let r = r.min(self.s.len());
        if r == self.s.len() {
            return self;
        }
        let take = |m: &Matrix| Matrix::from_fn(m.rows(), r, |i, j| m.get(i, j));
        self.u = take(&self.u);
        self.v = take(&self.v);
        self.s.truncate(r);
        self
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.s.iter().sum()
    }

    /// `U diag(weights) Vᵀ`.
    pub fn reconstruct_with(&self, weights: &[f64]) -> Matrix {
        let r = self.s.len();
        assert_eq!(weights.len(), r);
        let scaled = Matrix::from_fn(self.u.rows(), r, |i, j| self.u.get(i, j) * weights[j]);
        let vt = self.v.transpose();
        if r == 0 {
            return Matrix::zeros(self.u.rows(), self.v.rows());
        }
        scaled.matmul(&vt)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.s)
    }
}

/// Orthonormalize the columns of `a` in place (modified Gram–Schmidt, two passes).
/// Columns that collapse to zero are left at zero.
pub(crate) fn orthonormalize_columns(a: &mut Matrix) {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    for j in 0..n {
        let (done, rest) = cols.split_at_mut(j);
        let cj = &mut rest[0];
        let norm0 = dot(cj, cj).sqrt();
        for _ in 0..2 {
            for q in done.iter() {
                let proj = dot(q, cj);
                for (x, y) in cj.iter_mut().zip(q) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(cj, cj).sqrt();
        if norm <= 1e-12 * norm0.max(f64::MIN_POSITIVE) {
            cj.iter_mut().for_each(|x| *x = 0.0);
        } else {
            cj.iter_mut().for_each(|x| *x /= norm);
        }
    }
    for (j, c) in cols.iter().enumerate() {
        for i in 0..m {
            a.set(i, j, c[i]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
