//! Terminal cost, terminal feedback and terminal set.
//!
//! `P` and `K` come from the discrete algebraic Riccati equation. The
//! terminal set is the maximal positively invariant subset of the state and
//! input constraints under `x+ = (A + B K) x`, computed by accumulating
//! `H (A + B K)^k x <= b` until a step adds no new constraint.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3x6, Matrix6, Matrix6x3};
use thiserror::Error;

use crate::dynamics::SpacecraftParams;
use crate::error_system::{equilibrium_torque, spectral_radius, Gains, LoopMode, TorqueMap};
use crate::qp::{ActiveSetSolver, CscMatrix, QpError, QpProblem, QpSolver, SolverSettings, Status, INFINITY};
use crate::reference::ReferenceSample;
use crate::so3::Vec3;

pub const DARE_TOL: f64 = 1e-11;
pub const DARE_MAX_ITER: usize = 100_000;
pub const MAX_INVARIANT_STEPS: usize = 500;
const LP_REGULARIZATION: f64 = 1e-10;
const REDUNDANCY_TOL: f64 = 1e-9;
const DEDUP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("Riccati iteration did not converge in {iterations} iterations (relative change {change:e}); the pair may not be stabilizable or the data is ill scaled")]
    DareNotConverged { iterations: usize, change: f64 },
    #[error("R + B^T P B is not positive definite")]
    DareSingular,
    #[error("closed loop is not stable (spectral radius {0})")]
    Unstable(f64),
    #[error("invariant set not finitely determined within {0} steps")]
    NotFinitelyDetermined(usize),
    #[error("support LP failed with status {0:?}")]
    Lp(Status),
    #[error("support LP setup failed: {0}")]
    LpSetup(#[from] QpError),
    #[error("reference rate on axis {axis} leaves no slack to the rate bounds ({slack})")]
    NoRateSlack { axis: usize, slack: f64 },
    #[error("terminal torque at the origin violates the torque bounds on axis {axis}")]
    NoTorqueSlack { axis: usize },
}

/// `P_{j+1} = Q + A^T P A - A^T P B (R + B^T P B)^-1 B^T P A` from `P_0 = Q`.
/// Returns `P` and `K = -(R + B^T P B)^-1 B^T P A`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), TerminalError> {
    let step = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, TerminalError> {
        let bt_p = b.transpose() * p;
        let s = r + &bt_p * b;
        let chol = s.cholesky().ok_or(TerminalError::DareSingular)?;
        let bpa = &bt_p * a;
        let next = q + a.transpose() * p * a - bpa.transpose() * chol.solve(&bpa);
        Ok((&next + next.transpose()) * 0.5)
    };
    let mut p = q.clone();
    let mut converged = false;
    let mut change = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let next = step(&p)?;
        change = (&next - &p).norm();
        let scale = p.norm();
        p = next;
        if change <= DARE_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TerminalError::DareNotConverged {
            iterations: DARE_MAX_ITER,
            change,
        });
    }
    // The relative test stops near rounding level; a few more sweeps take
    // the residual the rest of the way while it still drops.
    let mut res = dare_residual(a, b, q, r, &p);
    for _ in 0..1000 {
        let next = step(&p)?;
        let next_res = dare_residual(a, b, q, r, &next);
        if next_res >= res {
            break;
        }
        p = next;
        res = next_res;
    }
    Ok((p.clone(), lqr_gain(a, b, r, &p)?))
}

pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let chol = s.cholesky().ok_or(TerminalError::DareSingular)?;
    Ok(-chol.solve(&(bt_p * a)))
}

/// Frobenius norm of the Riccati equation at `p`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let bpa = &bt_p * a;
    let rhs = match s.cholesky() {
        Some(c) => q + a.transpose() * p * a - bpa.transpose() * c.solve(&bpa),
        None => return f64::INFINITY,
    };
    (rhs - p).norm()
}

/// `{x : h x <= b}` with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    /// Normalizes rows. Zero rows are dropped when `b >= 0`; a zero row with
    /// `b < 0` is kept unnormalized so that the set stays empty.
    pub fn new(h: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(h.nrows(), b.len());
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..h.nrows() {
            let norm = h.row(i).norm();
            if norm <= 1e-14 {
                if b[i] < 0.0 {
                    rows.push(h.row(i).into_owned());
                    rhs.push(b[i]);
                }
                continue;
            }
            rows.push(h.row(i) / norm);
            rhs.push(b[i] / norm);
        }
        Self::from_rows(h.ncols(), &rows, &rhs)
    }

    fn from_rows(dim: usize, rows: &[nalgebra::RowDVector<f64>], rhs: &[f64]) -> Self {
        let mut h = DMatrix::zeros(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            h.row_mut(i).copy_from(r);
        }
        Self {
            h,
            b: DVector::from_column_slice(rhs),
        }
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            h[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        Self::new(h, b)
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Largest `h_i x - b_i`, or `-inf` without rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.h * x - &self.b).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.rows() == 0 || self.max_violation(x) <= tol
    }

    pub fn intersect(&self, other: &Polytope) -> Polytope {
        assert_eq!(self.dim(), other.dim());
        let mut h = DMatrix::zeros(self.rows() + other.rows(), self.dim());
        h.rows_mut(0, self.rows()).copy_from(&self.h);
        h.rows_mut(self.rows(), other.rows()).copy_from(&other.h);
        let b = DVector::from_iterator(self.rows() + other.rows(), self.b.iter().chain(other.b.iter()).copied());
        Polytope { h, b }
    }

    /// `max c.x` over the set, by a regularized LP.
    pub fn support(&self, c: &DVector<f64>) -> Result<f64, TerminalError> {
        let mut lp = SupportLp::new(self)?;
        lp.max(c)
    }

    /// Tight axis-aligned bounding box, `(lo, hi)`.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>), TerminalError> {
        let n = self.dim();
        let mut lp = SupportLp::new(self)?;
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
            hi[i] = lp.max(&e)?;
            lo[i] = -lp.max(&-e)?;
        }
        Ok((lo, hi))
    }

    /// Removes rows implied by the others.
    pub fn prune(&self) -> Result<Polytope, TerminalError> {
        let mut keep: Vec<bool> = vec![true; self.rows()];
        for i in 0..self.rows() {
            // Relax row i and see whether the others already enforce it.
            let mut relaxed = self.clone();
            for (k, &kept) in keep.iter().enumerate() {
                if !kept {
                    relaxed.b[k] = INFINITY;
                }
            }
            relaxed.b[i] += 1.0;
            let c = self.h.row(i).transpose();
            let s = relaxed.support(&c)?;
            if s <= self.b[i] + REDUNDANCY_TOL * (1.0 + self.b[i].abs()) {
                keep[i] = false;
            }
        }
        let rows: Vec<_> = (0..self.rows()).filter(|&i| keep[i]).map(|i| self.h.row(i).into_owned()).collect();
        let rhs: Vec<_> = (0..self.rows()).filter(|&i| keep[i]).map(|i| self.b[i]).collect();
        Ok(Self::from_rows(self.dim(), &rows, &rhs))
    }

    /// CSV with columns `h0..h{n-1},b`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("h{j}")).collect();
        header.push("b".into());
        out.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec: Vec<String> = self.h.row(i).iter().map(|v| format!("{v:e}")).collect();
            rec.push(format!("{:e}", self.b[i]));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One active-set instance reused for support queries over a fixed polytope.
struct SupportLp {
    solver: ActiveSetSolver,
    grad: Vec<f64>,
}

impl SupportLp {
    fn new(poly: &Polytope) -> Result<Self, TerminalError> {
        let n = poly.dim();
        let hess = CscMatrix::from_triplets(n, n, &(0..n).map(|i| (i, i, LP_REGULARIZATION)).collect::<Vec<_>>());
        let qp = QpProblem::new(
            hess,
            vec![0.0; n],
            CscMatrix::from_dense(&poly.h, 0.0),
            vec![-INFINITY; poly.rows()],
            poly.b.iter().copied().collect(),
        )?;
        let settings = SolverSettings {
            max_iter: Some(100 * (n + poly.rows()).max(10)),
            ..SolverSettings::default()
        };
        Ok(Self {
            solver: ActiveSetSolver::setup(&qp, &settings)?,
            grad: vec![0.0; n],
        })
    }

    fn max(&mut self, c: &DVector<f64>) -> Result<f64, TerminalError> {
        for (g, v) in self.grad.iter_mut().zip(c.iter()) {
            *g = -v;
        }
        self.solver.update_gradient(&self.grad);
        let info = self.solver.solve(None);
        if info.status != Status::Solved {
            return Err(TerminalError::Lp(info.status));
        }
        Ok(self.solver.x().iter().zip(c.iter()).map(|(a, b)| a * b).sum())
    }
}

fn dedup_key(h: &[f64], b: f64) -> Vec<i64> {
    h.iter().chain(std::iter::once(&b)).map(|v| (v / DEDUP_TOL).round() as i64).collect()
}

/// Maximal positively invariant subset of `constraints` under `x+ = a_cl x`.
pub fn max_invariant_set(a_cl: &DMatrix<f64>, constraints: &Polytope) -> Result<Polytope, TerminalError> {
    let rho = crate::error_system::spectral_radius_dyn(a_cl);
    if rho >= 1.0 {
        return Err(TerminalError::Unstable(rho));
    }
    let n = constraints.dim();
    let base = Polytope::new(constraints.h.clone(), constraints.b.clone());
    let mut rows: Vec<nalgebra::RowDVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut seen: HashMap<Vec<i64>, ()> = HashMap::new();
    for i in 0..base.rows() {
        let r = base.h.row(i).into_owned();
        if seen.insert(dedup_key(r.as_slice(), base.b[i]), ()).is_none() {
            rows.push(r);
            rhs.push(base.b[i]);
        }
    }
    let mut propagated = base.h.clone();
    for _ in 1..=MAX_INVARIANT_STEPS {
        propagated = &propagated * a_cl;
        let current = Polytope::from_rows(n, &rows, &rhs);
        let mut lp = SupportLp::new(&current)?;
        let mut fresh = Vec::new();
        for i in 0..propagated.nrows() {
            let norm = propagated.row(i).norm();
            let bi = base.b[i];
            if norm <= 1e-14 {
                // 0 <= b holds for any point of a set containing the origin.
                continue;
            }
            let r = propagated.row(i) / norm;
            let bn = bi / norm;
            if seen.contains_key(&dedup_key(r.as_slice(), bn)) {
                continue;
            }
            let s = lp.max(&r.transpose())?;
            if s > bn + REDUNDANCY_TOL * (1.0 + bn.abs()) {
                fresh.push((r, bn));
            }
        }
        if fresh.is_empty() {
            return current.prune();
        }
        for (r, bn) in fresh {
            if seen.insert(dedup_key(r.as_slice(), bn), ()).is_none() {
                rows.push(r);
                rhs.push(bn);
            }
        }
    }
    Err(TerminalError::NotFinitelyDetermined(MAX_INVARIANT_STEPS))
}

/// State and input constraints seen by the terminal feedback
/// `u = u_eq + K x`, in error coordinates.
///
/// Rate bounds use the box `|dw_i| <= s / sqrt(3)` with `s` the smallest
/// slack of `omega_d` to its bounds: then `|R_d^T dw|_2 <= s` for every
/// attitude of the reference. Torque bounds go through the torque map of the
/// mode evaluated at `reference`.
pub fn terminal_constraint_polytope(
    params: &SpacecraftParams,
    reference: &ReferenceSample,
    l_body: &Vec3,
    k_gain: &Matrix3x6<f64>,
    mode: LoopMode,
    gains: &Gains,
) -> Result<Polytope, TerminalError> {
    let mut slack = f64::INFINITY;
    for axis in 0..3 {
        let s = (params.omega_max[axis] - reference.omega_d[axis]).min(reference.omega_d[axis] - params.omega_min[axis]);
        if s <= 0.0 {
            return Err(TerminalError::NoRateSlack { axis, slack: s });
        }
        slack = slack.min(s);
    }
    let half = slack / 3f64.sqrt();
    let (map, u_eq) = match mode {
        LoopMode::Single => (TorqueMap::single_loop(), equilibrium_torque(params, reference, l_body)),
        LoopMode::Dual => (TorqueMap::dual_loop(params, reference, l_body, gains), Vec3::zeros()),
    };
    let t_x = map.gx + map.gu * k_gain;
    let t_0 = map.offset + map.gu * u_eq;
    let mut h = DMatrix::zeros(12, 6);
    let mut b = DVector::zeros(12);
    for i in 0..3 {
        h[(2 * i, 3 + i)] = 1.0;
        b[2 * i] = half;
        h[(2 * i + 1, 3 + i)] = -1.0;
        b[2 * i + 1] = half;
        let (up, lo) = (params.tau_max[i] - t_0[i], t_0[i] - params.tau_min[i]);
        if up <= 0.0 || lo <= 0.0 {
            return Err(TerminalError::NoTorqueSlack { axis: i });
        }
        for c in 0..6 {
            h[(6 + 2 * i, c)] = t_x[(i, c)];
            h[(7 + 2 * i, c)] = -t_x[(i, c)];
        }
        b[6 + 2 * i] = up;
        b[7 + 2 * i] = lo;
    }
    Ok(Polytope::new(h, b))
}

/// Terminal cost, feedback and set for one linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet {
    pub p: Matrix6<f64>,
    pub k_gain: Matrix3x6<f64>,
    pub x_set: Polytope,
    pub spectral_radius: f64,
}

impl TerminalSet {
    /// `constraints` receives the LQR gain and returns the polytope the
    /// closed loop must stay in.
    pub fn compute(
        a: &Matrix6<f64>,
        b: &Matrix6x3<f64>,
        q: &Matrix6<f64>,
        r: &nalgebra::Matrix3<f64>,
        constraints: impl FnOnce(&Matrix3x6<f64>) -> Result<Polytope, TerminalError>,
    ) -> Result<Self, TerminalError> {
        let ad = DMatrix::from_column_slice(6, 6, a.as_slice());
        let bd = DMatrix::from_column_slice(6, 3, b.as_slice());
        let (p, k) = solve_dare(
            &ad,
            &bd,
            &DMatrix::from_column_slice(6, 6, q.as_slice()),
            &DMatrix::from_column_slice(3, 3, r.as_slice()),
        )?;
        let k_gain = Matrix3x6::from_column_slice(k.as_slice());
        let a_cl = a + b * k_gain;
        let rho = spectral_radius(&a_cl);
        if rho >= 1.0 {
            return Err(TerminalError::Unstable(rho));
        }
        let poly = constraints(&k_gain)?;
        let x_set = max_invariant_set(&DMatrix::from_column_slice(6, 6, a_cl.as_slice()), &poly)?;
        Ok(Self {
            p: Matrix6::from_column_slice(p.as_slice()),
            k_gain,
            x_set,
            spectral_radius: rho,
        })
    }

    pub fn closed_loop(&self, a: &Matrix6<f64>, b: &Matrix6x3<f64>) -> Matrix6<f64> {
        a + b * self.k_gain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_system::discretize_lti;
    use crate::so3::RotationMatrix;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_dare_golden_ratio() {
        let (p, k) = solve_dare(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - phi).abs() < 1e-10);
        assert!((k[(0, 0)] + phi / (1.0 + phi)).abs() < 1e-10);
    }

    #[test]
    fn dare_without_input_is_lyapunov() {
        let (p, _) = solve_dare(&scalar(0.5), &scalar(0.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn invariant_set_trivial_cases() {
        let unit = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]);
        let zero = max_invariant_set(&DMatrix::zeros(2, 2), &unit).unwrap();
        assert_eq!(zero.rows(), 4);
        let half = max_invariant_set(&(DMatrix::identity(2, 2) * 0.5), &unit).unwrap();
        assert_eq!(half.rows(), 4);
        for i in 0..4 {
            assert!((half.b[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_set_of_rotation_contraction_is_smaller() {
        let (c, s) = (0.9 * 0.5f64.cos(), 0.9 * 0.5f64.sin());
        let a = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let unit = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]);
        let x = max_invariant_set(&a, &unit).unwrap();
        assert!(x.rows() > 4);
        let p = DVector::from_column_slice(&[0.99, 0.99]);
        assert!(!x.contains(&p, 0.0));
        let mut rng_x = 0.37f64;
        for _ in 0..200 {
            rng_x = (rng_x * 7.13 + 0.11).fract();
            let y = (rng_x * 3.7).fract();
            let p = DVector::from_column_slice(&[2.0 * rng_x - 1.0, 2.0 * y - 1.0]);
            if x.contains(&p, 0.0) {
                assert!(x.contains(&(&a * &p), 1e-9));
            }
        }
    }

    #[test]
    fn rate_slack_examples() {
        let p = SpacecraftParams::reference_scenario();
        let k = Matrix3x6::zeros();
        let g = Gains::critically_damped(1.2);
        let mut r = ReferenceSample {
            t: 0.0,
            r_d: RotationMatrix::identity(),
            omega_d: Vec3::zeros(),
            domega_d: Vec3::zeros(),
        };
        let poly = terminal_constraint_polytope(&p, &r, &Vec3::zeros(), &k, LoopMode::Dual, &g).unwrap();
        assert!((poly.b[0] - 0.5 / 3f64.sqrt()).abs() < 1e-15);
        r.omega_d = Vec3::new(0.4, 0.3, 0.0);
        let poly = terminal_constraint_polytope(&p, &r, &Vec3::zeros(), &k, LoopMode::Dual, &g).unwrap();
        assert!((poly.b[0] - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        r.omega_d = Vec3::new(0.5, 0.0, 0.0);
        assert!(matches!(
            terminal_constraint_polytope(&p, &r, &Vec3::zeros(), &k, LoopMode::Dual, &g),
            Err(TerminalError::NoRateSlack { axis: 0, .. })
        ));
    }

    #[test]
    fn dual_loop_ingredients() {
        let g = Gains::critically_damped(1.2);
        let m = discretize_lti(&g, 0.1);
        let q = Matrix6::from_diagonal(&nalgebra::Vector6::new(10.0, 10.0, 10.0, 1.0, 1.0, 1.0));
        let r = nalgebra::Matrix3::identity() * 100.0;
        let p = SpacecraftParams::reference_scenario();
        let rs = ReferenceSample {
            t: 0.0,
            r_d: RotationMatrix::identity(),
            omega_d: Vec3::new(0.4, 0.3, 0.0),
            domega_d: Vec3::zeros(),
        };
        let l = p.inertia() * rs.omega_d;
        let ts = TerminalSet::compute(&m.a, &m.b, &q, &r, |k| {
            terminal_constraint_polytope(&p, &rs, &l, k, LoopMode::Dual, &g)
        })
        .unwrap();
        assert!(ts.spectral_radius < 1.0);
        let res = dare_residual(
            &DMatrix::from_column_slice(6, 6, m.a.as_slice()),
            &DMatrix::from_column_slice(6, 3, m.b.as_slice()),
            &DMatrix::from_column_slice(6, 6, q.as_slice()),
            &DMatrix::from_column_slice(3, 3, r.as_slice()),
            &DMatrix::from_column_slice(6, 6, ts.p.as_slice()),
        );
        assert!(res <= 1e-9, "residual {res:e}");
        assert!(ts.x_set.b.iter().all(|&v| v > 0.0));
    }
}
