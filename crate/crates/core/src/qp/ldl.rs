//! Sparse `L D L^T` of a quasi-definite matrix given by its upper triangle,
//! after a fill-reducing symmetric permutation.
//!
//! Symbolic analysis (ordering, elimination tree, column counts) happens once
//! in [`LdlFactor::new`]; [`LdlFactor::refactor`] and [`LdlFactor::solve`]
//! work in preallocated storage.

use super::csc::CscMatrix;
use super::QpError;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    /// `perm[k]` is the original index eliminated at step `k`.
    perm: Vec<usize>,
    // Permuted upper triangle.
    cp: Vec<usize>,
    ci: Vec<usize>,
    cx: Vec<f64>,
    /// Original nonzero index to permuted nonzero index.
    map: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // Workspace.
    y_idx: Vec<usize>,
    elim: Vec<usize>,
    next_space: Vec<usize>,
    y_vals: Vec<f64>,
    y_used: Vec<bool>,
    x: Vec<f64>,
    positive_pivots: usize,
}

impl LdlFactor {
    /// Analyzes and factors `k`, which must hold only upper-triangular
    /// entries with every diagonal present.
    pub fn new(k: &CscMatrix, fill_reducing: bool) -> Result<Self, QpError> {
        let n = k.ncols;
        if k.nrows != n || !k.is_upper_triangular() {
            return Err(QpError::Factorization("matrix must be square upper triangular".into()));
        }
        let perm: Vec<usize> = if fill_reducing && n > 0 {
            let (p, _, _) = amd::order(n, &k.colptr, &k.rowind, &amd::Control::default())
                .map_err(|s| QpError::Factorization(format!("ordering failed: {s:?}")))?;
            p
        } else {
            (0..n).collect()
        };
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Permute the pattern, keeping the upper triangle.
        let mut counts = vec![0usize; n + 1];
        for (i, j, _) in k.triplets() {
            counts[pinv[i].max(pinv[j]) + 1] += 1;
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let cp = counts.clone();
        let mut next = counts;
        let nnz = k.nnz();
        let mut ci = vec![0; nnz];
        let mut map = vec![0; nnz];
        for j in 0..n {
            for p in k.colptr[j]..k.colptr[j + 1] {
                let (a, b) = (pinv[k.rowind[p]], pinv[j]);
                let col = a.max(b);
                ci[next[col]] = a.min(b);
                map[p] = next[col];
                next[col] += 1;
            }
        }

        // Elimination tree and column counts.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &ci[cp[j]..cp[j + 1]] {
                let mut i = row;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let mut f = Self {
            n,
            perm,
            cp,
            ci,
            cx: vec![0.0; nnz],
            map,
            etree,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
            next_space: vec![0; n],
            y_vals: vec![0.0; n],
            y_used: vec![false; n],
            x: vec![0.0; n],
            positive_pivots: 0,
        };
        f.refactor(&k.values)?;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Strictly lower nonzeros of `L`.
    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    pub fn positive_pivots(&self) -> usize {
        self.positive_pivots
    }

    /// Numeric factorization with new values on the original pattern.
    pub fn refactor(&mut self, values: &[f64]) -> Result<(), QpError> {
        debug_assert_eq!(values.len(), self.map.len());
        for (p, &v) in values.iter().enumerate() {
            self.cx[self.map[p]] = v;
        }
        let n = self.n;
        for i in 0..n {
            self.next_space[i] = self.lp[i];
            self.y_vals[i] = 0.0;
            self.y_used[i] = false;
        }
        self.positive_pivots = 0;
        for k in 0..n {
            self.d[k] = 0.0;
            let mut nnz_y = 0;
            for p in self.cp[k]..self.cp[k + 1] {
                let b = self.ci[p];
                if b == k {
                    self.d[k] += self.cx[p];
                    continue;
                }
                self.y_vals[b] += self.cx[p];
                if !self.y_used[b] {
                    self.y_used[b] = true;
                    self.elim[0] = b;
                    let mut nnz_e = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if self.y_used[next] {
                            break;
                        }
                        self.y_used[next] = true;
                        self.elim[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = self.y_idx[i];
                let end = self.next_space[c];
                let yc = self.y_vals[c];
                for j in self.lp[c]..end {
                    self.y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[end] = k;
                self.lx[end] = yc * self.dinv[c];
                self.d[k] -= yc * self.lx[end];
                self.next_space[c] += 1;
                self.y_vals[c] = 0.0;
                self.y_used[c] = false;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(QpError::Factorization(format!("zero pivot at step {k}")));
            }
            if self.d[k] > 0.0 {
                self.positive_pivots += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solves `K x = b` in place.
    pub fn solve(&mut self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            self.x[k] = b[self.perm[k]];
        }
        let x = &mut self.x;
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                s -= self.lx[j] * x[self.li[j]];
            }
            x[i] = s;
        }
        for k in 0..n {
            b[self.perm[k]] = x[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn kkt() -> DMatrix<f64> {
        // [[P, A^T], [A, -I]] with P = diag(4, 2, 3).
        let mut m = DMatrix::zeros(5, 5);
        m[(0, 0)] = 4.0;
        m[(1, 1)] = 2.0;
        m[(2, 2)] = 3.0;
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 1.0;
        let a = [[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]];
        for (r, row) in a.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                m[(3 + r, c)] = v;
                m[(c, 3 + r)] = v;
            }
            m[(3 + r, 3 + r)] = -1.0;
        }
        m
    }

    #[test]
    fn solves_quasi_definite_system() {
        let m = kkt();
        let b = [1.0, -2.0, 0.5, 3.0, -1.0];
        let want = m.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for amd in [false, true] {
            let mut f = LdlFactor::new(&CscMatrix::upper_from_dense(&m, 0.0), amd).unwrap();
            assert_eq!(f.positive_pivots(), 3);
            let mut x = b;
            f.solve(&mut x);
            assert!((DVector::from_column_slice(&x) - &want).amax() < 1e-12);
        }
    }

    #[test]
    fn refactor_with_new_values() {
        let m = kkt();
        let up = CscMatrix::upper_from_dense(&m, 0.0);
        let mut f = LdlFactor::new(&up, true).unwrap();
        let mut m2 = m.clone();
        m2[(3, 3)] = -0.1;
        m2[(4, 4)] = -0.1;
        let up2 = CscMatrix::upper_from_dense(&m2, 0.0);
        f.refactor(&up2.values).unwrap();
        let b = [0.3, 1.0, -1.0, 0.0, 2.0];
        let mut x = b;
        f.solve(&mut x);
        let want = m2.lu().solve(&DVector::from_column_slice(&b)).unwrap();
        assert!((DVector::from_column_slice(&x) - want).amax() < 1e-12);
    }

    #[test]
    fn detects_zero_pivot() {
        let up = CscMatrix::from_triplets(2, 2, &[(0, 0, 0.0), (0, 1, 1.0), (1, 1, 0.0)]);
        assert!(LdlFactor::new(&up, false).is_err());
    }
}
