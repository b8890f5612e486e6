//! Dense primal active-set QP solver.
//!
//! The working set is kept in the factored form of Goldfarb and Idnani:
//! with `H = L L^T` and `L^-1 N = Q [R; 0]` for the working normals `N`,
//! the matrix `J = L^-T Q = [J1 J2]` gives the null-space step
//! `p = -J2 J2^T grad` and the multipliers `lambda = R^-1 J1^T grad`.
//! Adding or dropping a constraint costs a sweep of Givens rotations.
//!
//! A feasible start is found by a phase on `(x, t)` that minimizes the
//! largest violation `t` with a small proximal term, re-anchored until the
//! violation reaches zero or stops decreasing.

use std::time::Instant;

use nalgebra::DMatrix;

use super::{inf_norm, is_infinite, QpError, QpProblem, QpSolver, SolveInfo, SolverSettings, Status, WarmStart};

/// Diagonal regularization that makes a semidefinite hessian definite.
pub const HESSIAN_REGULARIZATION: f64 = 1e-10;
const PLAIN_PIVOT_TOL: f64 = 1e-9;
const PHASE1_DELTA: f64 = 1e-6;
const FEAS_TOL: f64 = 1e-9;
const DEPENDENT_TOL: f64 = 1e-12;
const MAX_REANCHORS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Lower,
    Upper,
    Equality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActiveConstraint {
    pub row: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseEnd {
    Optimal,
    Feasible,
    Infeasible,
    MaxIter,
    TimeLimit,
    Stuck,
}

#[derive(Debug, Clone)]
pub struct ActiveSetSolver {
    settings: SolverSettings,
    max_iter: usize,
    /// Diagonal shift used in the factor and the gradient.
    regularization: f64,
    n: usize,
    m: usize,
    /// Hessian without regularization, column-major.
    h: Vec<f64>,
    g: Vec<f64>,
    /// Constraint rows, row-major.
    a: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    is_eq: Vec<bool>,
    row_norm: Vec<f64>,
    /// `L^-T` for the regularized hessian.
    j0: Vec<f64>,
    cap: usize,
    j: Vec<f64>,
    r: Vec<f64>,
    k: usize,
    active: Vec<usize>,
    x: Vec<f64>,
    anchor: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    d: Vec<f64>,
    w: Vec<f64>,
    lam: Vec<f64>,
    seed: Vec<usize>,
    seed_len: usize,
    out_x: Vec<f64>,
    y: Vec<f64>,
    active_out: Vec<ActiveConstraint>,
    active_len: usize,
    deadline: Option<Instant>,
    setup_seconds: f64,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        (1.0, 0.0, a)
    } else {
        let r = a.hypot(b);
        (a / r, b / r, r)
    }
}

impl ActiveSetSolver {
    pub fn setup(qp: &QpProblem, settings: &SolverSettings) -> Result<Self, QpError> {
        let t0 = Instant::now();
        let n = qp.n();
        let m = qp.m();
        let hd = qp.hessian.symmetric_to_dense();
        // Regularize only when the plain factor is missing or poorly conditioned.
        let scale = (0..n).map(|i| hd[(i, i)]).fold(1.0, f64::max);
        let plain = hd.clone().cholesky().filter(|c| {
            let l = c.l_dirty();
            (0..n).all(|i| l[(i, i)] * l[(i, i)] >= PLAIN_PIVOT_TOL * scale)
        });
        let (chol, regularization) = match plain {
            Some(c) => (c, 0.0),
            None => {
                let reg = &hd + DMatrix::identity(n, n) * HESSIAN_REGULARIZATION;
                (reg.cholesky().ok_or(QpError::NotPositiveDefinite)?, HESSIAN_REGULARIZATION)
            }
        };
        let j0 = chol
            .l()
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        let ad = qp.a.to_dense();
        let mut a = vec![0.0; m * n];
        for i in 0..m {
            for jj in 0..n {
                a[i * n + jj] = ad[(i, jj)];
            }
        }
        let row_norm = (0..m)
            .map(|i| a[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let cap = n + 1;
        let mut me = Self {
            settings: *settings,
            max_iter: settings.max_iter.unwrap_or((10 * n).max(50)),
            regularization,
            n,
            m,
            h: hd.as_slice().to_vec(),
            g: qp.grad.clone(),
            a,
            lower: qp.lower.clone(),
            upper: qp.upper.clone(),
            is_eq: vec![false; m],
            row_norm,
            j0: j0.as_slice().to_vec(),
            cap,
            j: vec![0.0; cap * cap],
            r: vec![0.0; cap * cap],
            k: 0,
            active: vec![0; cap],
            x: vec![0.0; cap],
            anchor: vec![0.0; cap],
            p: vec![0.0; cap],
            grad: vec![0.0; cap],
            d: vec![0.0; cap],
            w: vec![0.0; cap],
            lam: vec![0.0; cap],
            seed: vec![0; 2 * m + cap],
            seed_len: 0,
            out_x: vec![0.0; n],
            y: vec![0.0; m],
            active_out: vec![ActiveConstraint { row: 0, side: Side::Lower }; cap],
            active_len: 0,
            deadline: None,
            setup_seconds: 0.0,
        };
        me.classify_rows();
        me.setup_seconds = t0.elapsed().as_secs_f64();
        Ok(me)
    }

    /// Working set at the returned point.
    pub fn active_set(&self) -> &[ActiveConstraint] {
        &self.active_out[..self.active_len]
    }

    fn classify_rows(&mut self) {
        for i in 0..self.m {
            self.is_eq[i] = self.lower[i] == self.upper[i];
        }
    }

    // Constraint ids: 2i is the lower (or equality) side of row i, 2i + 1 the
    // upper side, 2m the phase-one bound t >= 0. Every constraint reads
    // `normal . v >= rhs`.

    fn t_bound(&self) -> usize {
        2 * self.m
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    fn normal_dot(&self, id: usize, v: &[f64], phase1: bool) -> f64 {
        if id == self.t_bound() {
            return v[self.n];
        }
        let i = id / 2;
        let s: f64 = self.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        let s = if id.is_multiple_of(2) { s } else { -s };
        if phase1 && !self.is_eq[i] {
            s + v[self.n]
        } else {
            s
        }
    }

    fn normal_into(&mut self, id: usize, phase1: bool) {
        let n = self.n;
        if id == self.t_bound() {
            self.w[..n].fill(0.0);
            self.w[n] = 1.0;
            return;
        }
        let i = id / 2;
        let sign = if id.is_multiple_of(2) { 1.0 } else { -1.0 };
        for c in 0..n {
            self.w[c] = sign * self.a[i * n + c];
        }
        if phase1 {
            self.w[n] = if self.is_eq[i] { 0.0 } else { 1.0 };
        }
    }

    fn rhs(&self, id: usize) -> f64 {
        if id == self.t_bound() {
            0.0
        } else if id.is_multiple_of(2) {
            self.lower[id / 2]
        } else {
            -self.upper[id / 2]
        }
    }

    fn is_equality_id(&self, id: usize) -> bool {
        id != self.t_bound() && self.is_eq[id / 2]
    }

    fn rotate_j(&mut self, c1: usize, c2: usize, c: f64, s: f64, nv: usize) {
        let cap = self.cap;
        for row in 0..nv {
            let a = self.j[row + c1 * cap];
            let b = self.j[row + c2 * cap];
            self.j[row + c1 * cap] = c * a + s * b;
            self.j[row + c2 * cap] = -s * a + c * b;
        }
    }

    fn reset_factor(&mut self, phase1: bool) {
        let cap = self.cap;
        self.j.fill(0.0);
        if phase1 {
            let v = 1.0 / PHASE1_DELTA.sqrt();
            for c in 0..cap {
                self.j[c + c * cap] = v;
            }
        } else {
            for c in 0..self.n {
                for row in 0..self.n {
                    self.j[row + c * cap] = self.j0[row + c * self.n];
                }
            }
        }
        self.k = 0;
    }

    /// Appends a constraint; `false` if its normal depends on the working set.
    fn add(&mut self, id: usize, nv: usize, phase1: bool) -> bool {
        if self.k >= nv {
            return false;
        }
        let cap = self.cap;
        self.normal_into(id, phase1);
        let mut norm = 0.0;
        for c in 0..nv {
            let mut s = 0.0;
            for row in 0..nv {
                s += self.j[row + c * cap] * self.w[row];
            }
            self.d[c] = s;
            norm += s * s;
        }
        let norm = norm.sqrt();
        let k = self.k;
        for i in (k + 1..nv).rev() {
            let (c, s, r) = givens(self.d[i - 1], self.d[i]);
            if s == 0.0 {
                continue;
            }
            self.d[i - 1] = r;
            self.d[i] = 0.0;
            self.rotate_j(i - 1, i, c, s, nv);
        }
        if self.d[k].abs() <= DEPENDENT_TOL * norm.max(f64::MIN_POSITIVE) {
            return false;
        }
        for row in 0..=k {
            self.r[row + k * cap] = self.d[row];
        }
        self.active[k] = id;
        self.k += 1;
        true
    }

    fn drop_at(&mut self, pos: usize, nv: usize) {
        let cap = self.cap;
        let old_k = self.k;
        for c in pos..old_k - 1 {
            for row in 0..=c + 1 {
                self.r[row + c * cap] = self.r[row + (c + 1) * cap];
            }
            self.active[c] = self.active[c + 1];
        }
        self.k -= 1;
        let k = self.k;
        for c in pos..k {
            let (cs, sn, rr) = givens(self.r[c + c * cap], self.r[c + 1 + c * cap]);
            self.r[c + c * cap] = rr;
            self.r[c + 1 + c * cap] = 0.0;
            for cc in c + 1..k {
                let a = self.r[c + cc * cap];
                let b = self.r[c + 1 + cc * cap];
                self.r[c + cc * cap] = cs * a + sn * b;
                self.r[c + 1 + cc * cap] = -sn * a + cs * b;
            }
            self.rotate_j(c, c + 1, cs, sn, nv);
        }
    }

    fn compute_grad(&mut self, phase1: bool) {
        let n = self.n;
        if phase1 {
            for c in 0..n {
                self.grad[c] = PHASE1_DELTA * (self.x[c] - self.anchor[c]);
            }
            self.grad[n] = 1.0 + PHASE1_DELTA * self.x[n];
        } else {
            for row in 0..n {
                self.grad[row] = self.g[row] + self.regularization * self.x[row];
            }
            for c in 0..n {
                let xc = self.x[c];
                if xc != 0.0 {
                    for row in 0..n {
                        self.grad[row] += self.h[row + c * n] * xc;
                    }
                }
            }
        }
    }

    fn compute_step(&mut self, nv: usize) {
        let cap = self.cap;
        self.p[..nv].fill(0.0);
        for c in self.k..nv {
            let mut s = 0.0;
            for row in 0..nv {
                s += self.j[row + c * cap] * self.grad[row];
            }
            for row in 0..nv {
                self.p[row] -= self.j[row + c * cap] * s;
            }
        }
    }

    fn compute_multipliers(&mut self, nv: usize) {
        let cap = self.cap;
        let k = self.k;
        for c in 0..k {
            let mut s = 0.0;
            for row in 0..nv {
                s += self.j[row + c * cap] * self.grad[row];
            }
            self.w[c] = s;
        }
        for i in (0..k).rev() {
            let mut s = self.w[i];
            for jj in i + 1..k {
                s -= self.r[i + jj * cap] * self.lam[jj];
            }
            self.lam[i] = s / self.r[i + i * cap];
        }
    }

    /// Smallest step along `p` to a constraint outside the working set.
    fn ratio_test(&self, phase1: bool, nv: usize) -> (f64, Option<usize>) {
        let pnorm = inf_norm(&self.p[..nv]);
        let mut best = f64::INFINITY;
        let mut block = None;
        let ids = 2 * self.m + usize::from(phase1);
        for id in 0..ids {
            let row = id / 2;
            if id < 2 * self.m {
                if self.is_eq[row] {
                    continue;
                }
                let bound = if id % 2 == 0 { self.lower[row] } else { self.upper[row] };
                if is_infinite(bound) {
                    continue;
                }
            }
            if self.active[..self.k].contains(&id) {
                continue;
            }
            let np = self.normal_dot(id, &self.p, phase1);
            let scale = if id < 2 * self.m { self.row_norm[row] + f64::from(u8::from(phase1)) } else { 1.0 };
            if np >= -1e-13 * scale * pnorm {
                continue;
            }
            let slack = self.normal_dot(id, &self.x, phase1) - self.rhs(id);
            let t = (slack / -np).max(0.0);
            if t < best {
                best = t;
                block = Some(id);
            }
        }
        (best, block)
    }

    fn run(&mut self, phase1: bool, iterations: &mut usize) -> PhaseEnd {
        let nv = if phase1 { self.n + 1 } else { self.n };
        let bland_after = 3 * nv;
        let mut at_min = false;
        let mut phase_iters = 0;
        let mut reanchors = 0;
        let mut t_anchor = self.x[self.n];
        loop {
            if phase1 && self.x[self.n] <= FEAS_TOL {
                return PhaseEnd::Feasible;
            }
            if *iterations >= self.max_iter {
                return PhaseEnd::MaxIter;
            }
            if self.deadline.is_some_and(|d| Instant::now() > d) {
                return PhaseEnd::TimeLimit;
            }
            self.compute_grad(phase1);
            if !at_min {
                self.compute_step(nv);
                let xs = 1.0 + inf_norm(&self.x[..nv]);
                if inf_norm(&self.p[..nv]) <= 1e-15 * xs {
                    at_min = true;
                }
            }
            if at_min {
                self.compute_multipliers(nv);
                let tol = 1e-10 * (1.0 + inf_norm(&self.grad[..nv]));
                let mut drop: Option<usize> = None;
                for pos in 0..self.k {
                    let id = self.active[pos];
                    if self.is_equality_id(id) || self.lam[pos] >= -tol {
                        continue;
                    }
                    drop = match drop {
                        None => Some(pos),
                        Some(q) if phase_iters >= bland_after => {
                            if id < self.active[q] {
                                Some(pos)
                            } else {
                                Some(q)
                            }
                        }
                        Some(q) => {
                            if self.lam[pos] < self.lam[q] {
                                Some(pos)
                            } else {
                                Some(q)
                            }
                        }
                    };
                }
                match drop {
                    Some(pos) => {
                        self.drop_at(pos, nv);
                        at_min = false;
                        *iterations += 1;
                        phase_iters += 1;
                        continue;
                    }
                    None if !phase1 => return PhaseEnd::Optimal,
                    None => {
                        let t = self.x[self.n];
                        if reanchors >= MAX_REANCHORS || t_anchor - t <= 1e-12 * (1.0 + t.abs()) {
                            return PhaseEnd::Infeasible;
                        }
                        reanchors += 1;
                        t_anchor = t;
                        self.anchor[..nv].copy_from_slice(&self.x[..nv]);
                        at_min = false;
                        continue;
                    }
                }
            }
            let (t, block) = self.ratio_test(phase1, nv);
            *iterations += 1;
            phase_iters += 1;
            match block {
                Some(b) if t < 1.0 => {
                    for c in 0..nv {
                        self.x[c] += t * self.p[c];
                    }
                    if !self.add(b, nv, phase1) {
                        return PhaseEnd::Stuck;
                    }
                    at_min = false;
                }
                _ => {
                    for c in 0..nv {
                        self.x[c] += self.p[c];
                    }
                    at_min = true;
                }
            }
        }
    }

    fn violation(&self, i: usize, x: &[f64]) -> f64 {
        let ax: f64 = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        let mut v: f64 = 0.0;
        if !is_infinite(self.lower[i]) {
            v = v.max(self.lower[i] - ax);
        }
        if !is_infinite(self.upper[i]) {
            v = v.max(ax - self.upper[i]);
        }
        v
    }

    fn row_tol(&self, i: usize) -> f64 {
        let b = if is_infinite(self.lower[i]) { 0.0 } else { self.lower[i].abs() };
        let c = if is_infinite(self.upper[i]) { 0.0 } else { self.upper[i].abs() };
        FEAS_TOL * (1.0 + b.max(c))
    }

    /// Finds a feasible point near the current `x`. Leaves phase-one
    /// working rows that are tight in `seed`.
    fn find_feasible(&mut self, iterations: &mut usize) -> Result<(), Status> {
        let n = self.n;
        self.reset_factor(true);
        self.x[n] = 0.0;
        // Project onto the equalities in the Euclidean metric.
        for i in 0..self.m {
            if self.is_eq[i] {
                self.add(2 * i, n + 1, true);
            }
        }
        if self.k > 0 {
            let cap = self.cap;
            let k = self.k;
            for pos in 0..k {
                let id = self.active[pos];
                self.w[pos] = self.rhs(id) - self.normal_dot(id, &self.x, true);
            }
            // Solve R^T z = r, then x += J1 z.
            for i in 0..k {
                let mut s = self.w[i];
                for jj in 0..i {
                    s -= self.r[jj + i * cap] * self.lam[jj];
                }
                self.lam[i] = s / self.r[i + i * cap];
            }
            for pos in 0..k {
                for row in 0..n {
                    self.x[row] += self.j[row + pos * cap] * self.lam[pos];
                }
            }
            for i in 0..self.m {
                if self.is_eq[i] && self.violation(i, &self.x) > self.row_tol(i) * 1e3 {
                    return Err(Status::Infeasible);
                }
            }
        }
        let mut worst: f64 = 0.0;
        let mut any = false;
        for i in 0..self.m {
            if !self.is_eq[i] {
                let v = self.violation(i, &self.x);
                worst = worst.max(v);
                any |= v > self.row_tol(i);
            }
        }
        self.seed_len = 0;
        if !any {
            return Ok(());
        }
        self.x[n] = worst * (1.0 + 1e-3) + 1e-9;
        self.anchor.copy_from_slice(&self.x);
        match self.run(true, iterations) {
            PhaseEnd::Feasible => {}
            PhaseEnd::Infeasible => return Err(Status::Infeasible),
            PhaseEnd::MaxIter => return Err(Status::MaxIter),
            PhaseEnd::TimeLimit => return Err(Status::TimeLimit),
            PhaseEnd::Stuck | PhaseEnd::Optimal => return Err(Status::NumericalError),
        }
        for pos in 0..self.k {
            let id = self.active[pos];
            if id != self.t_bound() && !self.is_eq[id / 2] {
                self.seed[self.seed_len] = id;
                self.seed_len += 1;
            }
        }
        Ok(())
    }

    fn is_tight(&self, id: usize) -> bool {
        let i = id / 2;
        let bound = if id.is_multiple_of(2) { self.lower[i] } else { self.upper[i] };
        if is_infinite(bound) {
            return false;
        }
        (self.normal_dot(id, &self.x, false) - self.rhs(id)).abs() <= self.row_tol(i)
    }

    fn finish(&mut self, status: Status, iterations: usize, t0: Instant) -> SolveInfo {
        let n = self.n;
        self.out_x.copy_from_slice(&self.x[..n]);
        self.y.fill(0.0);
        self.active_len = 0;
        if status == Status::Solved {
            self.compute_grad(false);
            self.compute_multipliers(n);
            for pos in 0..self.k {
                let id = self.active[pos];
                let row = id / 2;
                let side = if self.is_eq[row] {
                    Side::Equality
                } else if id.is_multiple_of(2) {
                    Side::Lower
                } else {
                    Side::Upper
                };
                self.y[row] = if id.is_multiple_of(2) { -self.lam[pos] } else { self.lam[pos] };
                self.active_out[self.active_len] = ActiveConstraint { row, side };
                self.active_len += 1;
            }
        }
        let mut obj = 0.0;
        for c in 0..n {
            let mut hx = 0.0;
            for row in 0..n {
                hx += self.h[row + c * n] * self.x[row];
            }
            obj += self.x[c] * (0.5 * hx + self.g[c]);
        }
        SolveInfo {
            status,
            iterations,
            objective: if status == Status::Infeasible { f64::NAN } else { obj },
            setup_seconds: self.setup_seconds,
            solve_seconds: t0.elapsed().as_secs_f64(),
        }
    }
}

impl QpSolver for ActiveSetSolver {
    fn solve(&mut self, warm: Option<WarmStart<'_>>) -> SolveInfo {
        let t0 = Instant::now();
        self.deadline = self.settings.time_limit.map(|s| t0 + std::time::Duration::from_secs_f64(s));
        let n = self.n;
        self.x.fill(0.0);
        let mut guess_len = 0;
        if let Some(w) = warm {
            assert_eq!(w.x.len(), n, "warm start x has wrong length");
            self.x[..n].copy_from_slice(w.x);
            if let Some(y) = w.y {
                assert_eq!(y.len(), self.m, "warm start y has wrong length");
                // Stash guessed ids at the back of the seed buffer.
                let base = self.seed.len() - self.m;
                for (i, &yi) in y.iter().enumerate() {
                    if !self.is_eq[i] && yi != 0.0 {
                        self.seed[base + guess_len] = if yi > 0.0 { 2 * i + 1 } else { 2 * i };
                        guess_len += 1;
                    }
                }
            }
        }
        let mut iterations = 0;
        if let Err(status) = self.find_feasible(&mut iterations) {
            return self.finish(status, iterations, t0);
        }
        self.x[n] = 0.0;
        self.reset_factor(false);
        for i in 0..self.m {
            if self.is_eq[i] {
                self.add(2 * i, n, false);
            }
        }
        for s in 0..self.seed_len {
            let id = self.seed[s];
            if self.is_tight(id) && !self.active[..self.k].contains(&id) {
                self.add(id, n, false);
            }
        }
        let base = self.seed.len() - self.m;
        for s in 0..guess_len {
            let id = self.seed[base + s];
            if self.is_tight(id) && !self.active[..self.k].contains(&id) {
                self.add(id, n, false);
            }
        }
        let status = match self.run(false, &mut iterations) {
            PhaseEnd::Optimal => Status::Solved,
            PhaseEnd::MaxIter => Status::MaxIter,
            PhaseEnd::TimeLimit => Status::TimeLimit,
            _ => Status::NumericalError,
        };
        self.finish(status, iterations, t0)
    }

    fn x(&self) -> &[f64] {
        &self.out_x
    }

    fn duals(&self) -> &[f64] {
        &self.y
    }

    fn update_gradient(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.n);
        self.g.copy_from_slice(grad);
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
        self.lower.copy_from_slice(lower);
        self.upper.copy_from_slice(upper);
        self.classify_rows();
        Ok(())
    }

    fn setup_seconds(&self) -> f64 {
        self.setup_seconds
    }
}
