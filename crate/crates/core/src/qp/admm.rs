//! Operator-splitting QP solver.
//!
//! The problem is equilibrated once (Ruiz scaling of the KKT matrix plus a
//! cost scale), the quasi-definite system
//!
//! ```text
//! [ P + sigma I      A^T       ]
//! [      A      -diag(1/rho)   ]
//! ```
//!
//! is factored with a sparse `L D L^T`, and each iteration costs one solve.
//! All buffers are sized in [`AdmmSolver::setup`]; `solve` does not allocate
//! unless polishing is enabled.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::csc::CscMatrix;
use super::ldl::LdlFactor;
use super::{dot, inf_norm, is_infinite, QpError, QpProblem, QpSolver, SolveInfo, SolverSettings, Status, WarmStart, INFINITY};

const DEFAULT_MAX_ITER: usize = 20_000;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_STEP: f64 = 5.0;
const RHO_TRIGGER: f64 = 10.0;
const MAX_RHO_UPDATES: usize = 10;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const DIVISION_TOL: f64 = 1e-30;

#[derive(Debug, Clone)]
pub struct AdmmSolver {
    settings: SolverSettings,
    max_iter: usize,
    original: QpProblem,
    n: usize,
    m: usize,
    // Scaled data.
    p: CscMatrix,
    a: CscMatrix,
    q: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    l_inf: Vec<bool>,
    u_inf: Vec<bool>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    e: Vec<f64>,
    einv: Vec<f64>,
    c: f64,
    // Penalty and factorization.
    rho: f64,
    rho_vec: Vec<f64>,
    rho_inv: Vec<f64>,
    kkt_values: Vec<f64>,
    rho_diag_pos: Vec<usize>,
    ldl: LdlFactor,
    // Iterates and work.
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    x_prev: Vec<f64>,
    z_prev: Vec<f64>,
    y_prev: Vec<f64>,
    rhs: Vec<f64>,
    zr: Vec<f64>,
    work_n: Vec<f64>,
    work_n2: Vec<f64>,
    work_m: Vec<f64>,
    best_x: Vec<f64>,
    best_z: Vec<f64>,
    best_y: Vec<f64>,
    out_x: Vec<f64>,
    out_y: Vec<f64>,
    setup_seconds: f64,
    prim_res: f64,
    dual_res: f64,
    rho_updates: usize,
}

/// Scaled residuals of the current iterate.
#[derive(Debug, Clone, Copy)]
struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    prim_norm: f64,
    dual_norm: f64,
}

fn limit_scaling(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

impl AdmmSolver {
    pub fn setup(qp: &QpProblem, settings: &SolverSettings) -> Result<Self, QpError> {
        let t0 = Instant::now();
        assert!(settings.eps_abs > 0.0 && settings.eps_rel >= 0.0, "tolerances must be positive");
        let n = qp.n();
        let m = qp.m();
        let mut p = qp.hessian.clone();
        let mut a = qp.a.clone();
        let mut q = qp.grad.clone();
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m];
        let mut c = 1.0;

        let mut dn = vec![0.0; n];
        let mut em = vec![0.0; m];
        for _ in 0..settings.scaling_iters {
            dn.fill(0.0);
            em.fill(0.0);
            p.symmetric_col_inf_norms(&mut dn);
            a.col_inf_norms(&mut dn);
            a.row_inf_norms(&mut em);
            for v in dn.iter_mut() {
                *v = 1.0 / limit_scaling(*v).sqrt();
            }
            for v in em.iter_mut() {
                *v = 1.0 / limit_scaling(*v).sqrt();
            }
            p.scale_cols(&dn);
            p.scale_rows(&dn);
            a.scale_cols(&dn);
            a.scale_rows(&em);
            for j in 0..n {
                q[j] *= dn[j];
                d[j] *= dn[j];
            }
            for i in 0..m {
                e[i] *= em[i];
            }
            // Cost scaling.
            dn.fill(0.0);
            p.symmetric_col_inf_norms(&mut dn);
            let mean = if n > 0 { dn.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let gamma = 1.0 / limit_scaling(mean.max(inf_norm(&q)));
            p.values.iter_mut().for_each(|v| *v *= gamma);
            q.iter_mut().for_each(|v| *v *= gamma);
            c *= gamma;
        }

        let l_inf: Vec<bool> = qp.lower.iter().map(|&v| is_infinite(v)).collect();
        let u_inf: Vec<bool> = qp.upper.iter().map(|&v| is_infinite(v)).collect();
        let l: Vec<f64> = (0..m)
            .map(|i| if l_inf[i] { -INFINITY } else { e[i] * qp.lower[i] })
            .collect();
        let u: Vec<f64> = (0..m)
            .map(|i| if u_inf[i] { INFINITY } else { e[i] * qp.upper[i] })
            .collect();

        // KKT pattern: P + sigma I, A^T above the lower diagonal block.
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(p.nnz() + n + a.nnz() + m);
        trip.extend(p.triplets());
        for j in 0..n {
            trip.push((j, j, settings.sigma));
        }
        for (i, j, v) in a.triplets() {
            trip.push((j, n + i, v));
        }
        for i in 0..m {
            trip.push((n + i, n + i, -1.0));
        }
        let kkt = CscMatrix::from_triplets(n + m, n + m, &trip);
        let rho_diag_pos: Vec<usize> = (0..m).map(|i| kkt.colptr[n + i + 1] - 1).collect();

        let mut me = Self {
            settings: *settings,
            max_iter: settings.max_iter.unwrap_or(DEFAULT_MAX_ITER),
            original: qp.clone(),
            n,
            m,
            p,
            a,
            q,
            l,
            u,
            l_inf,
            u_inf,
            einv: e.iter().map(|v| 1.0 / v).collect(),
            dinv: d.iter().map(|v| 1.0 / v).collect(),
            d,
            e,
            c,
            rho: settings.rho.clamp(RHO_MIN, RHO_MAX),
            rho_vec: vec![0.0; m],
            rho_inv: vec![0.0; m],
            kkt_values: kkt.values.clone(),
            rho_diag_pos,
            ldl: LdlFactor::new(&kkt, true)?,
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
            x_prev: vec![0.0; n],
            z_prev: vec![0.0; m],
            y_prev: vec![0.0; m],
            rhs: vec![0.0; n + m],
            zr: vec![0.0; m],
            work_n: vec![0.0; n],
            work_n2: vec![0.0; n],
            work_m: vec![0.0; m],
            best_x: vec![0.0; n],
            best_z: vec![0.0; m],
            best_y: vec![0.0; m],
            out_x: vec![0.0; n],
            out_y: vec![0.0; m],
            setup_seconds: 0.0,
            prim_res: f64::INFINITY,
            dual_res: f64::INFINITY,
            rho_updates: 0,
        };
        me.set_rho_vec();
        me.refactor()?;
        if me.ldl.positive_pivots() != n {
            return Err(QpError::Factorization(format!(
                "KKT matrix has {} positive pivots, expected {n}",
                me.ldl.positive_pivots()
            )));
        }
        me.setup_seconds = t0.elapsed().as_secs_f64();
        Ok(me)
    }

    /// Strictly lower nonzeros of the KKT factor.
    pub fn factor_nnz(&self) -> usize {
        self.ldl.factor_nnz()
    }

    pub fn kkt_dim(&self) -> usize {
        self.n + self.m
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Unscaled primal and dual residuals of the last returned iterate.
    pub fn residuals(&self) -> (f64, f64) {
        (self.prim_res, self.dual_res)
    }

    fn set_rho_vec(&mut self) {
        for i in 0..self.m {
            let r = if self.l_inf[i] && self.u_inf[i] {
                RHO_MIN
            } else if !self.l_inf[i] && !self.u_inf[i] && (self.u[i] - self.l[i]).abs() < 1e-12 * (1.0 + self.u[i].abs()) {
                (RHO_EQ_FACTOR * self.rho).min(RHO_MAX)
            } else {
                self.rho
            };
            self.rho_vec[i] = r;
            self.rho_inv[i] = 1.0 / r;
        }
    }

    fn refactor(&mut self) -> Result<(), QpError> {
        for i in 0..self.m {
            self.kkt_values[self.rho_diag_pos[i]] = -self.rho_inv[i];
        }
        self.ldl.refactor(&self.kkt_values)
    }

    fn iterate(&mut self) {
        let (n, m, alpha, sigma) = (self.n, self.m, self.settings.alpha, self.settings.sigma);
        self.x_prev.copy_from_slice(&self.x);
        self.z_prev.copy_from_slice(&self.z);
        self.y_prev.copy_from_slice(&self.y);
        for j in 0..n {
            self.rhs[j] = sigma * self.x[j] - self.q[j];
        }
        for i in 0..m {
            self.rhs[n + i] = self.z[i] - self.rho_inv[i] * self.y[i];
        }
        self.ldl.solve(&mut self.rhs);
        for j in 0..n {
            self.x[j] = alpha * self.rhs[j] + (1.0 - alpha) * self.x_prev[j];
        }
        for i in 0..m {
            let zt = self.z_prev[i] + self.rho_inv[i] * (self.rhs[n + i] - self.y[i]);
            let zr = alpha * zt + (1.0 - alpha) * self.z_prev[i];
            self.zr[i] = zr;
            let z = (zr + self.rho_inv[i] * self.y[i]).clamp(self.l[i], self.u[i]);
            self.z[i] = z;
            self.y[i] += self.rho_vec[i] * (zr - z);
        }
    }

    fn residuals_of(&mut self, x: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let cinv = 1.0 / self.c;
        self.a.gemv(1.0, x, 0.0, &mut self.work_m);
        let mut prim = 0.0f64;
        let mut ax_norm = 0.0f64;
        let mut z_norm = 0.0f64;
        for i in 0..self.m {
            prim = prim.max((self.einv[i] * (self.work_m[i] - z[i])).abs());
            ax_norm = ax_norm.max((self.einv[i] * self.work_m[i]).abs());
            z_norm = z_norm.max((self.einv[i] * z[i]).abs());
        }
        self.p.symv_upper(1.0, x, 0.0, &mut self.work_n);
        self.a.gemv_t(1.0, y, 0.0, &mut self.work_n2);
        let mut dual = 0.0f64;
        let (mut px_norm, mut aty_norm, mut q_norm) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..self.n {
            let s = cinv * self.dinv[j];
            dual = dual.max((s * (self.work_n[j] + self.q[j] + self.work_n2[j])).abs());
            px_norm = px_norm.max((s * self.work_n[j]).abs());
            aty_norm = aty_norm.max((s * self.work_n2[j]).abs());
            q_norm = q_norm.max((s * self.q[j]).abs());
        }
        let prim_norm = ax_norm.max(z_norm);
        let dual_norm = px_norm.max(aty_norm).max(q_norm);
        Residuals {
            prim,
            dual,
            eps_prim: self.settings.eps_abs + self.settings.eps_rel * prim_norm,
            eps_dual: self.settings.eps_abs + self.settings.eps_rel * dual_norm,
            prim_norm,
            dual_norm,
        }
    }

    fn primal_infeasible(&mut self) -> bool {
        let eps = self.settings.eps_prim_inf;
        // Project the dual step onto the normal cone of the bounds.
        let mut norm = 0.0f64;
        let mut support = 0.0;
        for i in 0..self.m {
            let mut dy = self.y[i] - self.y_prev[i];
            if self.u_inf[i] {
                dy = dy.min(0.0);
            }
            if self.l_inf[i] {
                dy = dy.max(0.0);
            }
            self.work_m[i] = dy;
            norm = norm.max((self.e[i] * dy).abs());
            if dy > 0.0 {
                support += self.u[i] * dy;
            } else if dy < 0.0 {
                support += self.l[i] * dy;
            }
        }
        if norm <= DIVISION_TOL {
            return false;
        }
        if support >= -eps * norm {
            return false;
        }
        self.a.gemv_t(1.0, &self.work_m, 0.0, &mut self.work_n);
        let mut aty = 0.0f64;
        for j in 0..self.n {
            aty = aty.max((self.dinv[j] * self.work_n[j]).abs());
        }
        aty <= eps * norm
    }

    fn dual_infeasible(&mut self) -> bool {
        let eps = self.settings.eps_dual_inf;
        let mut norm = 0.0f64;
        for j in 0..self.n {
            self.work_n2[j] = self.x[j] - self.x_prev[j];
            norm = norm.max((self.d[j] * self.work_n2[j]).abs());
        }
        if norm <= DIVISION_TOL {
            return false;
        }
        let cinv = 1.0 / self.c;
        if cinv * dot(&self.q, &self.work_n2) >= -eps * norm {
            return false;
        }
        self.p.symv_upper(1.0, &self.work_n2, 0.0, &mut self.work_n);
        for j in 0..self.n {
            if (cinv * self.dinv[j] * self.work_n[j]).abs() > eps * norm {
                return false;
            }
        }
        self.a.gemv(1.0, &self.work_n2, 0.0, &mut self.work_m);
        for i in 0..self.m {
            let v = self.einv[i] * self.work_m[i];
            let ok = match (self.l_inf[i], self.u_inf[i]) {
                (true, true) => true,
                (false, true) => v >= -eps * norm,
                (true, false) => v <= eps * norm,
                (false, false) => v.abs() <= eps * norm,
            };
            if !ok {
                return false;
            }
        }
        true
    }

    fn scaled_objective(&mut self, x: &[f64]) -> f64 {
        self.p.symv_upper(1.0, x, 0.0, &mut self.work_n);
        (0.5 * dot(x, &self.work_n) + dot(&self.q, x)) / self.c
    }

    fn maybe_adapt_rho(&mut self, r: &Residuals) -> bool {
        if !self.settings.adaptive_rho || self.rho_updates >= MAX_RHO_UPDATES {
            return false;
        }
        let prim = r.prim / r.prim_norm.max(DIVISION_TOL);
        let dual = r.dual / r.dual_norm.max(DIVISION_TOL);
        if dual <= DIVISION_TOL || prim <= DIVISION_TOL {
            return false;
        }
        let ratio = prim / dual;
        let new_rho = if ratio > RHO_TRIGGER {
            self.rho * RHO_STEP
        } else if ratio < 1.0 / RHO_TRIGGER {
            self.rho / RHO_STEP
        } else {
            return false;
        };
        let new_rho = new_rho.clamp(RHO_MIN, RHO_MAX);
        if new_rho == self.rho {
            return false;
        }
        let old = self.rho;
        self.rho = new_rho;
        self.set_rho_vec();
        if self.refactor().is_err() {
            self.rho = old;
            self.set_rho_vec();
            let _ = self.refactor();
            return false;
        }
        self.rho_updates += 1;
        true
    }

    fn apply_warm_start(&mut self, warm: Option<WarmStart<'_>>) {
        match warm {
            Some(w) => {
                assert_eq!(w.x.len(), self.n, "warm start x has wrong length");
                for j in 0..self.n {
                    self.x[j] = self.dinv[j] * w.x[j];
                }
                self.a.gemv(1.0, &self.x, 0.0, &mut self.z);
                for i in 0..self.m {
                    self.z[i] = self.z[i].clamp(self.l[i], self.u[i]);
                }
                match w.y {
                    Some(y) => {
                        assert_eq!(y.len(), self.m, "warm start y has wrong length");
                        for i in 0..self.m {
                            self.y[i] = self.c * self.einv[i] * y[i];
                        }
                    }
                    None => self.y.fill(0.0),
                }
            }
            None => {
                self.x.fill(0.0);
                self.z.fill(0.0);
                self.y.fill(0.0);
                for i in 0..self.m {
                    self.z[i] = self.z[i].clamp(self.l[i], self.u[i]);
                }
            }
        }
    }

    fn write_output(&mut self, from_best: bool) {
        let cinv = 1.0 / self.c;
        let (x, y) = if from_best { (&self.best_x, &self.best_y) } else { (&self.x, &self.y) };
        for j in 0..self.n {
            self.out_x[j] = self.d[j] * x[j];
        }
        for i in 0..self.m {
            self.out_y[i] = cinv * self.e[i] * y[i];
        }
    }

    fn stash_best(&mut self) {
        self.best_x.copy_from_slice(&self.x);
        self.best_z.copy_from_slice(&self.z);
        self.best_y.copy_from_slice(&self.y);
    }

    /// Solves the equality-constrained problem on the active set guessed
    /// from the current output and keeps it if the residuals improve.
    fn polish(&mut self) {
        let qp = &self.original;
        let (n, m) = (self.n, self.m);
        let mut active: Vec<(usize, f64)> = Vec::new();
        let mut ax = vec![0.0; m];
        qp.a.gemv(1.0, &self.out_x, 0.0, &mut ax);
        for i in 0..m {
            let y = self.out_y[i];
            let lower_gap = ax[i] - qp.lower[i];
            let upper_gap = qp.upper[i] - ax[i];
            if !is_infinite(qp.lower[i]) && lower_gap < -y {
                active.push((i, qp.lower[i]));
            } else if !is_infinite(qp.upper[i]) && upper_gap < y {
                active.push((i, qp.upper[i]));
            }
        }
        let k = active.len();
        let h = qp.hessian.symmetric_to_dense();
        let a = qp.a.to_dense();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        let mut rhs = DVector::zeros(n + k);
        for j in 0..n {
            kkt[(j, j)] += 1e-12;
            rhs[j] = -qp.grad[j];
        }
        for (r, &(i, b)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            kkt[(n + r, n + r)] = -1e-12;
            rhs[n + r] = b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { return };
        let x: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let mut y = vec![0.0; m];
        for (r, &(i, _)) in active.iter().enumerate() {
            y[i] = sol[n + r];
        }
        let before = super::verify::check_kkt(qp, &self.out_x, &self.out_y);
        let after = super::verify::check_kkt(qp, &x, &y);
        if after.max_violation() < before.max_violation() {
            self.out_x.copy_from_slice(&x);
            self.out_y.copy_from_slice(&y);
            self.prim_res = after.primal;
            self.dual_res = after.stationarity;
        }
    }
}

impl QpSolver for AdmmSolver {
    fn solve(&mut self, warm: Option<WarmStart<'_>>) -> SolveInfo {
        let t0 = Instant::now();
        self.apply_warm_start(warm);
        self.rho_updates = 0;
        let mut status = Status::MaxIter;
        let mut best_score = f64::INFINITY;
        let mut iterations = 0;
        let check_every = self.settings.check_every.max(1);
        let mut use_best = false;
        while iterations < self.max_iter {
            self.iterate();
            iterations += 1;
            if iterations % check_every != 0 && iterations != self.max_iter {
                continue;
            }
            let (x, z, y) = (
                std::mem::take(&mut self.x),
                std::mem::take(&mut self.z),
                std::mem::take(&mut self.y),
            );
            let r = self.residuals_of(&x, &z, &y);
            self.x = x;
            self.z = z;
            self.y = y;
            if !r.prim.is_finite() || !r.dual.is_finite() {
                status = Status::NumericalError;
                use_best = best_score.is_finite();
                break;
            }
            self.prim_res = r.prim;
            self.dual_res = r.dual;
            if r.prim <= r.eps_prim && r.dual <= r.eps_dual {
                status = Status::Solved;
                break;
            }
            let score = (r.prim / r.eps_prim).max(r.dual / r.eps_dual);
            if score < best_score {
                best_score = score;
                self.stash_best();
            }
            if self.primal_infeasible() {
                status = Status::Infeasible;
                break;
            }
            if self.dual_infeasible() {
                status = Status::Unbounded;
                break;
            }
            if let Some(limit) = self.settings.time_limit {
                if t0.elapsed().as_secs_f64() > limit {
                    status = Status::TimeLimit;
                    use_best = true;
                    break;
                }
            }
            self.maybe_adapt_rho(&r);
        }
        if status == Status::MaxIter {
            use_best = best_score.is_finite();
        }
        self.write_output(use_best);
        let xs = if use_best { std::mem::take(&mut self.best_x) } else { std::mem::take(&mut self.x) };
        let objective = self.scaled_objective(&xs);
        if use_best {
            self.best_x = xs;
        } else {
            self.x = xs;
        }
        if self.settings.polish && status == Status::Solved {
            self.polish();
        }
        SolveInfo {
            status,
            iterations,
            objective: if matches!(status, Status::Infeasible | Status::Unbounded) {
                f64::NAN
            } else {
                objective
            },
            setup_seconds: self.setup_seconds,
            solve_seconds: t0.elapsed().as_secs_f64(),
        }
    }

    fn x(&self) -> &[f64] {
        &self.out_x
    }

    fn duals(&self) -> &[f64] {
        &self.out_y
    }

    fn update_gradient(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.n);
        for j in 0..self.n {
            self.q[j] = self.c * self.d[j] * grad[j];
        }
        self.original.grad.copy_from_slice(grad);
    }

    fn update_bounds(&mut self, lower: &[f64], upper: &[f64]) -> Result<(), QpError> {
        if lower.len() != self.m || upper.len() != self.m {
            return Err(QpError::Dimension("bound length".into()));
        }
        for i in 0..self.m {
            if lower[i] > upper[i] {
                return Err(QpError::InconsistentBounds {
                    row: i,
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        for i in 0..self.m {
            self.l_inf[i] = is_infinite(lower[i]);
            self.u_inf[i] = is_infinite(upper[i]);
            self.l[i] = if self.l_inf[i] { -INFINITY } else { self.e[i] * lower[i] };
            self.u[i] = if self.u_inf[i] { INFINITY } else { self.e[i] * upper[i] };
            self.original.lower[i] = lower[i].clamp(-INFINITY, INFINITY);
            self.original.upper[i] = upper[i].clamp(-INFINITY, INFINITY);
        }
        self.work_m.copy_from_slice(&self.rho_inv);
        self.set_rho_vec();
        if self.work_m != self.rho_inv {
            self.refactor()?;
        }
        Ok(())
    }

    fn setup_seconds(&self) -> f64 {
        self.setup_seconds
    }
}
