//! Compressed sparse column storage.

use nalgebra::DMatrix;

/// Column-compressed sparse matrix with sorted, duplicate-free row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowind: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowind: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// explicit zeros are kept so the pattern is stable.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut t: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(i, j, _) in &t {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds {nrows}x{ncols}");
        }
        t.sort_by_key(|a| (a.1, a.0));
        let mut colptr = vec![0; ncols + 1];
        let mut rowind = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in t {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                rowind.push(i);
                values.push(v);
                colptr[j + 1] += 1;
                last = Some((i, j));
            }
        }
        for j in 0..ncols {
            colptr[j + 1] += colptr[j];
        }
        Self {
            nrows,
            ncols,
            colptr,
            rowind,
            values,
        }
    }

    /// Keeps entries with `|v| > drop_tol`.
    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut t = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)].abs() > drop_tol {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
    }

    /// Upper triangle (diagonal included) of a dense symmetric matrix.
    pub fn upper_from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut t = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..=j.min(m.nrows().saturating_sub(1)) {
                if m[(i, j)].abs() > drop_tol {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.colptr[j]..self.colptr[j + 1]).map(move |p| (self.rowind[p], j, self.values[p]))
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// Full symmetric matrix from an upper-triangular store.
    pub fn symmetric_to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    pub fn is_upper_triangular(&self) -> bool {
        self.triplets().all(|(i, j, _)| i <= j)
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// `y = alpha * A x + beta * y`.
    pub fn gemv(&self, alpha: f64, x: &[f64], beta: f64, y: &mut [f64]) {
        debug_assert!(x.len() == self.ncols && y.len() == self.nrows);
        scale(y, beta);
        for j in 0..self.ncols {
            let xj = alpha * x[j];
            if xj != 0.0 {
                for p in self.colptr[j]..self.colptr[j + 1] {
                    y[self.rowind[p]] += self.values[p] * xj;
                }
            }
        }
    }

    /// `y = alpha * A^T x + beta * y`.
    pub fn gemv_t(&self, alpha: f64, x: &[f64], beta: f64, y: &mut [f64]) {
        debug_assert!(x.len() == self.nrows && y.len() == self.ncols);
        for j in 0..self.ncols {
            let mut s = 0.0;
            for p in self.colptr[j]..self.colptr[j + 1] {
                s += self.values[p] * x[self.rowind[p]];
            }
            y[j] = alpha * s + if beta == 0.0 { 0.0 } else { beta * y[j] };
        }
    }

    /// `y = alpha * S x + beta * y` where `self` stores the upper triangle of
    /// the symmetric `S`.
    pub fn symv_upper(&self, alpha: f64, x: &[f64], beta: f64, y: &mut [f64]) {
        debug_assert!(x.len() == self.ncols && y.len() == self.nrows);
        scale(y, beta);
        for j in 0..self.ncols {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowind[p];
                let v = alpha * self.values[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }

    /// Column scaling `A diag(d)` in place.
    pub fn scale_cols(&mut self, d: &[f64]) {
        for j in 0..self.ncols {
            for p in self.colptr[j]..self.colptr[j + 1] {
                self.values[p] *= d[j];
            }
        }
    }

    /// Row scaling `diag(d) A` in place.
    pub fn scale_rows(&mut self, d: &[f64]) {
        for (v, &i) in self.values.iter_mut().zip(&self.rowind) {
            *v *= d[i];
        }
    }

    /// Infinity norm of each column, accumulated by `max` into `out`.
    pub fn col_inf_norms(&self, out: &mut [f64]) {
        for j in 0..self.ncols {
            for p in self.colptr[j]..self.colptr[j + 1] {
                out[j] = out[j].max(self.values[p].abs());
            }
        }
    }

    /// Infinity norm of each row, accumulated by `max` into `out`.
    pub fn row_inf_norms(&self, out: &mut [f64]) {
        for (v, &i) in self.values.iter().zip(&self.rowind) {
            out[i] = out[i].max(v.abs());
        }
    }

    /// Column norms of a symmetric matrix stored as upper triangle.
    pub fn symmetric_col_inf_norms(&self, out: &mut [f64]) {
        for j in 0..self.ncols {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowind[p];
                let a = self.values[p].abs();
                out[j] = out[j].max(a);
                out[i] = out[i].max(a);
            }
        }
    }
}

fn scale(y: &mut [f64], beta: f64) {
    if beta == 0.0 {
        y.fill(0.0);
    } else if beta != 1.0 {
        y.iter_mut().for_each(|v| *v *= beta);
    }
}
