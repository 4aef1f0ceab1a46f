//! Small dense helpers shared by the regression solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Row-major dense design matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Design {
    n_cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(n_cols: usize) -> Self {
        Self { n_cols, data: Vec::new() }
    }

    pub fn with_capacity(n_cols: usize, rows: usize) -> Self {
        Self {
            n_cols,
            data: Vec::with_capacity(n_cols * rows),
        }
    }

    pub fn from_rows(n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % n_cols.max(1), 0, "row-major buffer is not a whole number of rows");
        Self { n_cols, data }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_cols);
        self.data.extend_from_slice(row);
    }

    pub fn n_rows(&self) -> usize {
        self.data.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols.max(1))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Design {
        let mut out = Design::with_capacity(self.n_cols, rows.len());
        for &r in rows {
            out.push_row(self.row(r));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Column means and population standard deviations. Columns with zero
/// spread are flagged constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Design) -> Self {
        let p = x.n_cols();
        let n = x.n_rows().max(1) as f64;
        let mut means = vec![0.0; p];
        for row in x.rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut scales = vec![0.0; p];
        for row in x.rows() {
            for ((s, v), m) in scales.iter_mut().zip(row).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in scales.iter_mut() {
            *s = (*s / n).sqrt();
        }
        Self { means, scales }
    }

    /// A column is treated as constant when its spread is negligible next to its level.
    pub fn is_constant(&self, p: usize) -> bool {
        self.scales[p] <= 1e-12 * (1.0 + self.means[p].abs())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factor of a symmetric positive definite matrix, adding a small
/// diagonal jitter when the plain factorization fails.
pub fn factor_spd(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch);
    }
    let scale = (0..a.nrows()).map(|k| a[(k, k)].abs()).fold(0.0, f64::max).max(1.0);
    let mut jitter = 1e-12 * scale;
    for _ in 0..8 {
        let mut m = a.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch);
        }
        jitter *= 100.0;
    }
    Err(Error::Numerical("normal equations are not positive definite".into()))
}

/// Solves the symmetric positive definite system `a x = b`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(factor_spd(a.clone())?.solve(b))
}
