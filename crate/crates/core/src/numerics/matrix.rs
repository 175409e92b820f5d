use serde::{Deserialize, Serialize};

use crate::error::{FrostError, Result};

/// Dense row-major matrix.
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FrostError::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(FrostError::shape("Matrix::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// `M · v`, unchecked length.
    pub(crate) fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| super::dot(self.row(r), v))
            .collect()
    }

    /// `Mᵀ · u`, unchecked length.
    pub(crate) fn mul_vec_t(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &ur) in u.iter().enumerate().take(self.rows) {
            if ur != 0.0 {
                super::axpy(&mut out, ur, self.row(r));
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        super::check_dim("Matrix::matvec", self.cols, v)?;
        Ok(self.mul_vec(v))
    }

    pub fn matvec_t(&self, u: &[f64]) -> Result<Vec<f64>> {
        super::check_dim("Matrix::matvec_t", self.rows, u)?;
        Ok(self.mul_vec_t(u))
    }

    pub fn frobenius_norm(&self) -> f64 {
        super::norm(&self.data)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s · (u ⊗ v)`
    pub(crate) fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            super::axpy(row, s * ur, v);
        }
    }
}
