//! Sparse matrix storage and spectral-radius estimation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this the spectral radius is treated as zero.
pub const NILPOTENT_THRESHOLD: f64 = 1e-12;

const POWER_TOL: f64 = 1e-10;
const POWER_RESIDUAL_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 10_000;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_ptr: vec![0; rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Builds from a row-major dense buffer, dropping exact zeros.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match shape");
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for (c, &v) in data[r * cols..(r + 1) * cols].iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self::from_row_major(m.nrows(), m.ncols(), &data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[r * self.cols + self.col_idx[k]] = self.values[k];
            }
        }
        out
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.to_row_major())
    }

    /// Entry lookup; linear in the row length.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.row_ptr[r]..self.row_ptr[r + 1])
            .find(|&k| self.col_idx[k] == c)
            .map_or(0.0, |k| self.values[k])
    }

    /// `out += A x`
    #[inline]
    pub fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = 0.0;
            for (&c, &v) in self.col_idx[lo..hi].iter().zip(&self.values[lo..hi]) {
                acc += v * x[c];
            }
            *o += acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_add(x, &mut out);
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let dst = next[c];
                col_idx[dst] = r;
                values[dst] = self.values[k];
                next[c] += 1;
            }
        }
        Self { rows: self.cols, cols: self.rows, row_ptr, col_idx, values }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }
}

/// Spectral radius of a square sparse matrix.
///
/// Power iteration from the all-ones vector; converged when the Rayleigh
/// quotient magnitude stabilises to `1e-10` relative and the eigen-residual is
/// small. Complex dominant pairs never converge this way and fall through to a
/// dense Schur decomposition.
pub fn spectral_radius(m: &CsrMatrix) -> f64 {
    assert_eq!(m.rows(), m.cols(), "spectral radius needs a square matrix");
    let n = m.rows();
    if n == 0 || m.nnz() == 0 {
        return 0.0;
    }
    if let Some(rho) = power_iteration(m) {
        return rho;
    }
    dense_spectral_radius(&m.to_dmatrix())
}

fn power_iteration(m: &CsrMatrix) -> Option<f64> {
    let n = m.rows();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; n];
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        y.iter_mut().for_each(|v| *v = 0.0);
        m.mul_vec_add(&x, &mut y);
        let rq: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NILPOTENT_THRESHOLD {
            return None;
        }
        let mag = rq.abs();
        if (mag - prev).abs() <= POWER_TOL * mag {
            let resid = x.iter().zip(&y).map(|(a, b)| (b - rq * a).powi(2)).sum::<f64>().sqrt();
            if resid <= POWER_RESIDUAL_TOL * mag {
                return Some(mag);
            }
        }
        prev = mag;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    None
}

/// Spectral radius from the full complex spectrum.
pub fn dense_spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Rescales `m` so that its spectral radius equals `target`.
pub fn scale_spectral_radius(m: &CsrMatrix, target: f64) -> Result<CsrMatrix> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidParameter(format!("target spectral radius {target}")));
    }
    let rho = spectral_radius(m);
    if rho <= NILPOTENT_THRESHOLD {
        return Err(Error::NilpotentMatrix(rho));
    }
    Ok(m.scaled(target / rho))
}

/// Dense convenience wrapper over [`scale_spectral_radius`].
pub fn scale_spectral_radius_dense(m: &DMatrix<f64>, target: f64) -> Result<DMatrix<f64>> {
    Ok(scale_spectral_radius(&CsrMatrix::from_dmatrix(m), target)?.to_dmatrix())
}
