//! KKT certificate for a candidate primal-dual pair, computed from the
//! problem data alone.

use super::{inf_norm, is_infinite, QpProblem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `|H x + g + A^T y|_inf`.
    pub stationarity: f64,
    /// Largest bound violation of `A x`.
    pub primal: f64,
    /// Largest `min(|y_i|, distance of A_i x to the bound y_i points at)`.
    pub complementarity: f64,
    /// `|g|_inf`, the scale for the stationarity test.
    pub grad_norm: f64,
}

impl KktReport {
    pub fn max_violation(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }

    /// Stationarity within `stat_rel (1 + |g|)`, feasibility within
    /// `feas_tol`, complementarity within `comp_tol`.
    pub fn certifies(&self, stat_rel: f64, feas_tol: f64, comp_tol: f64) -> bool {
        self.stationarity <= stat_rel * (1.0 + self.grad_norm) && self.primal <= feas_tol && self.complementarity <= comp_tol
    }
}

pub fn check_kkt(qp: &QpProblem, x: &[f64], y: &[f64]) -> KktReport {
    assert_eq!(x.len(), qp.n());
    assert_eq!(y.len(), qp.m());
    let mut r = vec![0.0; qp.n()];
    qp.hessian.symv_upper(1.0, x, 0.0, &mut r);
    let mut aty = vec![0.0; qp.n()];
    qp.a.gemv_t(1.0, y, 0.0, &mut aty);
    for ((ri, gi), ai) in r.iter_mut().zip(&qp.grad).zip(&aty) {
        *ri += gi + ai;
    }
    let mut ax = vec![0.0; qp.m()];
    qp.a.gemv(1.0, x, 0.0, &mut ax);
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..qp.m() {
        let (l, u) = (qp.lower[i], qp.upper[i]);
        if !is_infinite(l) {
            primal = primal.max(l - ax[i]);
        }
        if !is_infinite(u) {
            primal = primal.max(ax[i] - u);
        }
        let gap = if y[i] > 0.0 {
            if is_infinite(u) { f64::INFINITY } else { (u - ax[i]).abs() }
        } else if y[i] < 0.0 {
            if is_infinite(l) { f64::INFINITY } else { (ax[i] - l).abs() }
        } else {
            0.0
        };
        comp = comp.max(y[i].abs().min(gap));
    }
    KktReport {
        stationarity: inf_norm(&r),
        primal,
        complementarity: comp,
        grad_norm: inf_norm(&qp.grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::INFINITY;
    use nalgebra::DMatrix;

    #[test]
    fn certifies_known_optimum_and_rejects_wrong_sign() {
        // min 1/2 x^2 - x  s.t. x <= 0.5: x = 0.5, y = 0.5.
        let qp = QpProblem::from_dense(
            &DMatrix::identity(1, 1),
            &[-1.0],
            &DMatrix::identity(1, 1),
            &[-INFINITY],
            &[0.5],
        )
        .unwrap();
        let ok = check_kkt(&qp, &[0.5], &[0.5]);
        assert!(ok.certifies(1e-12, 1e-12, 1e-12));
        let bad = check_kkt(&qp, &[0.5], &[-0.5]);
        assert!(!bad.certifies(1e-5, 1e-6, 1e-6));
        let infeasible = check_kkt(&qp, &[1.0], &[0.0]);
        assert!((infeasible.primal - 0.5).abs() < 1e-15);
    }
}
