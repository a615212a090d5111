//! Compressed sparse column matrices sized for the 33-bus problem scale.

use std::fmt;

/// Sparse matrix in compressed sparse column format. Row indices within each
/// column are stored in strictly increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            by_col[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        for col in by_col.iter_mut() {
            col.sort_unstable_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for &(r, v) in col.iter() {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        self.row_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// y += alpha * A x
    pub fn mul_acc(&self, x: &[f64], y: &mut [f64], alpha: f64) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, v) in self.col(j) {
                y[i] += alpha * v * xj;
            }
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_acc(x, &mut y, 1.0);
        y
    }

    /// y += alpha * A' x
    pub fn mul_transpose_acc(&self, x: &[f64], y: &mut [f64], alpha: f64) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for (i, v) in self.col(j) {
                acc += v * x[i];
            }
            y[j] += alpha * acc;
        }
    }

    pub fn mul_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.mul_transpose_acc(x, &mut y, 1.0);
        y
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                triplets.push((j, i, v));
            }
        }
        CscMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.ncols, other.ncols);
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                triplets.push((i, j, v));
            }
            for (i, v) in other.col(j) {
                triplets.push((self.nrows + i, j, v));
            }
        }
        CscMatrix::from_triplets(self.nrows + other.nrows, self.ncols, &triplets)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                out[i][j] += v;
            }
        }
        out
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.col(j)
            .find(|&(r, _)| r == i)
            .map(|(_, v)| v)
            .unwrap_or(0.0)
    }

    /// Scales as D_row * A * D_col in place.
    pub fn scale(&mut self, row_scale: &[f64], col_scale: &[f64]) {
        debug_assert_eq!(row_scale.len(), self.nrows);
        debug_assert_eq!(col_scale.len(), self.ncols);
        for j in 0..self.ncols {
            let lo = self.col_ptr[j];
            let hi = self.col_ptr[j + 1];
            for p in lo..hi {
                self.values[p] *= row_scale[self.row_idx[p]] * col_scale[j];
            }
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let t = self.transpose();
        if t.col_ptr != self.col_ptr || t.row_idx != self.row_idx {
            // Patterns may differ only by explicit zeros; fall back to value check.
            let a = self.to_dense();
            let b = t.to_dense();
            for i in 0..self.nrows {
                for j in 0..self.ncols {
                    if (a[i][j] - b[i][j]).abs() > tol {
                        return false;
                    }
                }
            }
            return true;
        }
        self.values
            .iter()
            .zip(t.values.iter())
            .all(|(x, y)| (x - y).abs() <= tol)
    }
}

impl fmt::Display for CscMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} sparse, {} nnz", self.nrows, self.ncols, self.nnz())
    }
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
