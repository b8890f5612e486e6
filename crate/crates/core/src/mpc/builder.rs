//! Horizon problems and their QP form at any condensing level.
//!
//! A staged problem keeps per-knot dynamics, torque maps and rate rows.
//! [`StagedProblem::condense`] turns it into a QP in which only some states
//! stay decision variables: with block size `M`, `x_k` is kept when `k` is a
//! multiple of `M` below `N`, and `x_N` is kept whenever `M < N`. `M = 1` is
//! the sparse multiple-shooting form, `M = N` is single shooting with inputs
//! only. Dropped states are affine in the variables since the last kept one.
//!
//! Variables are ordered by time, `[u_0, x_1?, u_1, x_2?, ...]`, so each
//! state expression covers a contiguous column range. Input variables are
//! offsets from each stage's `u_ref`, so a zero error gives the zero vector
//! as exact optimum; [`Recovery`] adds the references back.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector6};
use thiserror::Error;

use crate::dynamics::SpacecraftParams;
use crate::error_system::{
    discretize_lpv, equilibrium_torque, lpv_continuous, ErrorState, LoopMode, LtiModel, TorqueMap,
};
use crate::qp::{CscMatrix, QpError, QpProblem, INFINITY};
use crate::reference::ReferenceGrid;
use crate::so3::{Mat3, Vec3};
use crate::terminal::TerminalSet;

use super::MpcConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("reference grid has {got} samples, horizon needs {want}")]
    GridLength { got: usize, want: usize },
    #[error("grid step {grid} differs from controller step {config}")]
    GridStep { grid: f64, config: f64 },
    #[error("initial error is not finite")]
    NonFiniteState,
    #[error("condensing block {block} invalid for horizon {n}")]
    Block { block: usize, n: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// One knot: `x_{k+1} = a x_k + b u_k + c` and `tau_k = torque(x_k, u_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
    pub c: Vector6<f64>,
    pub torque: TorqueMap,
    /// Input at which the stage cost vanishes.
    pub u_ref: Vec3,
}

/// Rate rows on `x_k`: `lo <= R_d^T dw <= hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRows {
    pub rot: Mat3,
    pub lo: Vec3,
    pub hi: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagedProblem {
    pub mode: LoopMode,
    pub x0: Vector6<f64>,
    /// `N` stages.
    pub stages: Vec<Stage>,
    /// Rows for `x_1 .. x_N`.
    pub rates: Vec<RateRows>,
    pub q: Matrix6<f64>,
    pub r: Matrix3<f64>,
    pub p: Matrix6<f64>,
    pub terminal_h: DMatrix<f64>,
    pub terminal_b: DVector<f64>,
    pub tau_min: Vec3,
    pub tau_max: Vec3,
}

fn check_inputs(config: &MpcConfig, x0: &ErrorState, grid: &ReferenceGrid) -> Result<(), BuildError> {
    if grid.samples.len() != config.n_steps + 1 {
        return Err(BuildError::GridLength {
            got: grid.samples.len(),
            want: config.n_steps + 1,
        });
    }
    if (grid.dt - config.dt).abs() > 1e-12 * config.dt {
        return Err(BuildError::GridStep {
            grid: grid.dt,
            config: config.dt,
        });
    }
    if !x0.to_vector().iter().all(|v| v.is_finite()) {
        return Err(BuildError::NonFiniteState);
    }
    Ok(())
}

fn rate_rows(params: &SpacecraftParams, grid: &ReferenceGrid) -> Vec<RateRows> {
    grid.samples[1..]
        .iter()
        .map(|s| RateRows {
            rot: s.r_d.matrix().transpose(),
            lo: params.omega_min - s.omega_d,
            hi: params.omega_max - s.omega_d,
        })
        .collect()
}

/// Torque-input MPC on the per-knot linearized error system.
pub fn build_single_loop(
    config: &MpcConfig,
    x0: &ErrorState,
    grid: &ReferenceGrid,
    params: &SpacecraftParams,
    l_body: &Vec3,
    terminal: &TerminalSet,
) -> Result<StagedProblem, BuildError> {
    check_inputs(config, x0, grid)?;
    let stages = grid.samples[..config.n_steps]
        .iter()
        .map(|s| {
            let m = discretize_lpv(&lpv_continuous(params, s, l_body), config.dt);
            Stage {
                a: m.a,
                b: m.b,
                c: m.c,
                torque: TorqueMap::single_loop(),
                u_ref: equilibrium_torque(params, s, l_body),
            }
        })
        .collect();
    Ok(assemble(LoopMode::Single, config, x0, stages, grid, params, terminal))
}

/// Outer-loop MPC on the stabilized inner loop; `model` is the constant
/// discrete inner-loop model.
pub fn build_dual_loop(
    config: &MpcConfig,
    x0: &ErrorState,
    grid: &ReferenceGrid,
    params: &SpacecraftParams,
    l_body: &Vec3,
    terminal: &TerminalSet,
    model: &LtiModel,
) -> Result<StagedProblem, BuildError> {
    check_inputs(config, x0, grid)?;
    let stages = grid.samples[..config.n_steps]
        .iter()
        .map(|s| Stage {
            a: model.a,
            b: model.b,
            c: Vector6::zeros(),
            torque: TorqueMap::dual_loop(params, s, l_body, &config.gains),
            u_ref: Vec3::zeros(),
        })
        .collect();
    Ok(assemble(LoopMode::Dual, config, x0, stages, grid, params, terminal))
}

fn assemble(
    mode: LoopMode,
    config: &MpcConfig,
    x0: &ErrorState,
    stages: Vec<Stage>,
    grid: &ReferenceGrid,
    params: &SpacecraftParams,
    terminal: &TerminalSet,
) -> StagedProblem {
    StagedProblem {
        mode,
        x0: x0.to_vector(),
        stages,
        rates: rate_rows(params, grid),
        q: config.q,
        r: config.r_input,
        p: terminal.p,
        terminal_h: terminal.x_set.h.clone(),
        terminal_b: terminal.x_set.b.clone(),
        tau_min: params.tau_min,
        tau_max: params.tau_max,
    }
}

/// `x = coef z[start..start + w] + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateExpr {
    pub start: usize,
    pub coef: DMatrix<f64>,
    pub c: Vector6<f64>,
}

impl StateExpr {
    pub fn eval(&self, z: &[f64]) -> Vector6<f64> {
        let w = self.coef.ncols();
        let zs = DVector::from_column_slice(&z[self.start..self.start + w]);
        let v = &self.coef * zs;
        self.c + Vector6::from_column_slice(v.as_slice())
    }
}

/// Row ranges of one stage's constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRows {
    /// Dynamics rows defining `x_{k+1}`, when kept.
    pub dynamics: Option<usize>,
    pub torque: usize,
    /// Rate rows on `x_{k+1}`.
    pub rate: usize,
}

/// Maps QP variables back to states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub block: usize,
    pub n_vars: usize,
    /// Expressions for `x_0 .. x_N`.
    pub states: Vec<StateExpr>,
    pub u_cols: Vec<usize>,
    pub u_refs: Vec<Vec3>,
    pub x_cols: Vec<Option<usize>>,
    pub rows: Vec<StageRows>,
    pub terminal_rows: usize,
    pub terminal_count: usize,
    /// Constant part of the objective so that `1/2 z'Hz + g'z + constant`
    /// equals the horizon cost.
    pub objective_constant: f64,
}

impl Recovery {
    pub fn inputs(&self, z: &[f64]) -> Vec<Vec3> {
        self.u_cols
            .iter()
            .zip(&self.u_refs)
            .map(|(&c, r)| Vec3::new(z[c], z[c + 1], z[c + 2]) + r)
            .collect()
    }

    pub fn first_input(&self, z: &[f64]) -> Vec3 {
        let c = self.u_cols[0];
        Vec3::new(z[c], z[c + 1], z[c + 2]) + self.u_refs[0]
    }

    pub fn predicted_states(&self, z: &[f64]) -> Vec<Vector6<f64>> {
        self.states.iter().map(|e| e.eval(z)).collect()
    }

    /// Variable vector carrying the given trajectories; `states` holds
    /// `x_0 .. x_N` (`x_0` is ignored).
    pub fn pack(&self, states: &[Vector6<f64>], inputs: &[Vec3]) -> Vec<f64> {
        let mut z = vec![0.0; self.n_vars];
        for (k, &c) in self.u_cols.iter().enumerate() {
            z[c..c + 3].copy_from_slice((inputs[k] - self.u_refs[k]).as_slice());
        }
        for (k, col) in self.x_cols.iter().enumerate() {
            if let Some(c) = col {
                z[*c..*c + 6].copy_from_slice(states[k].as_slice());
            }
        }
        z
    }

    /// Duals of the previous problem moved one stage forward; rows without
    /// a counterpart start at zero.
    pub fn shift_duals(&self, prev: &Recovery, y_prev: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        let n = self.rows.len();
        for k in 0..n {
            let new = self.rows[k];
            if k + 1 < prev.rows.len() {
                let old = prev.rows[k + 1];
                y[new.torque..new.torque + 3].copy_from_slice(&y_prev[old.torque..old.torque + 3]);
                y[new.rate..new.rate + 3].copy_from_slice(&y_prev[old.rate..old.rate + 3]);
                if let (Some(a), Some(b)) = (new.dynamics, old.dynamics) {
                    y[a..a + 6].copy_from_slice(&y_prev[b..b + 6]);
                }
            }
        }
        if let (Some(last_new), Some(last_old)) = (self.rows.last(), prev.rows.last()) {
            y[last_new.rate..last_new.rate + 3].copy_from_slice(&y_prev[last_old.rate..last_old.rate + 3]);
        }
        let t = self.terminal_count;
        if t == prev.terminal_count {
            y[self.terminal_rows..self.terminal_rows + t].copy_from_slice(&y_prev[prev.terminal_rows..prev.terminal_rows + t]);
        }
    }
}

/// Condensed QP together with its recovery map.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonQp {
    pub qp: QpProblem,
    pub recovery: Recovery,
}

impl HorizonQp {
    pub fn objective(&self, z: &[f64]) -> f64 {
        self.qp.objective(z) + self.recovery.objective_constant
    }
}

struct Triplets {
    h: Vec<(usize, usize, f64)>,
    a: Vec<(usize, usize, f64)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Triplets {
    /// Adds `2 coef^T W coef` to the hessian and `2 coef^T W (c - target)`
    /// to the gradient; returns the constant term.
    fn quad(&mut self, g: &mut [f64], start: usize, coef: &DMatrix<f64>, w: &DMatrix<f64>, offset: &DVector<f64>) -> f64 {
        let wc = w * coef;
        let hb = coef.transpose() * &wc * 2.0;
        for j in 0..hb.ncols() {
            for i in 0..=j {
                if hb[(i, j)] != 0.0 {
                    self.h.push((start + i, start + j, hb[(i, j)]));
                }
            }
        }
        let gb = wc.transpose() * offset * 2.0;
        for (i, v) in gb.iter().enumerate() {
            g[start + i] += v;
        }
        (offset.transpose() * w * offset)[(0, 0)]
    }

    /// Rows `lo <= coef z[start..] + c <= hi`.
    fn rows(&mut self, first_row: usize, start: usize, coef: &DMatrix<f64>, c: &DVector<f64>, lo: &[f64], hi: &[f64]) {
        for i in 0..coef.nrows() {
            for j in 0..coef.ncols() {
                if coef[(i, j)] != 0.0 {
                    self.a.push((first_row + i, start + j, coef[(i, j)]));
                }
            }
            let shift = |b: f64| if crate::qp::is_infinite(b) { b } else { b - c[i] };
            self.lower.push(shift(lo[i]));
            self.upper.push(shift(hi[i]));
        }
    }
}

fn mat<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn vecd<const R: usize>(v: &nalgebra::SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

impl StagedProblem {
    pub fn n_steps(&self) -> usize {
        self.stages.len()
    }

    pub fn is_kept(&self, k: usize, block: usize) -> bool {
        let n = self.n_steps();
        (k.is_multiple_of(block) && k < n) || (k == n && block < n)
    }

    pub fn sparse_qp(&self) -> HorizonQp {
        self.condense(1).expect("block 1 is always valid")
    }

    pub fn condense(&self, block: usize) -> Result<HorizonQp, BuildError> {
        let n = self.n_steps();
        if block == 0 || block > n {
            return Err(BuildError::Block { block, n });
        }
        // Layout.
        let mut u_cols = Vec::with_capacity(n);
        let mut x_cols = vec![None; n + 1];
        let mut col = 0;
        for k in 0..n {
            u_cols.push(col);
            col += 3;
            if self.is_kept(k + 1, block) {
                x_cols[k + 1] = Some(col);
                col += 6;
            }
        }
        let n_vars = col;

        let q = mat(&self.q);
        let r = mat(&self.r);
        let p = mat(&self.p);
        let mut t = Triplets {
            h: Vec::new(),
            a: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        };
        let mut g = vec![0.0; n_vars];
        let mut constant = 0.0;
        let mut states = Vec::with_capacity(n + 1);
        states.push(StateExpr {
            start: 0,
            coef: DMatrix::zeros(6, 0),
            c: self.x0,
        });
        let mut rows = Vec::with_capacity(n);
        let mut row = 0;
        let e_omega = {
            let mut s = DMatrix::zeros(3, 6);
            for i in 0..3 {
                s[(i, 3 + i)] = 1.0;
            }
            s
        };
        for k in 0..n {
            let st = &self.stages[k];
            let xk = &states[k];
            let uc = u_cols[k];
            let (start, w) = if xk.coef.ncols() == 0 { (uc, 0) } else { (xk.start, xk.coef.ncols()) };
            debug_assert!(w == 0 || start + w == uc);
            // Stage cost on x_k (x_0 is a constant) and u_k.
            if k == 0 {
                constant += (self.x0.transpose() * self.q * self.x0)[(0, 0)];
            } else {
                constant += t.quad(&mut g, xk.start, &xk.coef, &q, &vecd(&xk.c));
            }
            constant += t.quad(&mut g, uc, &DMatrix::identity(3, 3), &r, &DVector::zeros(3));

            // [x_k vars | u_k] coefficient of the successor and of the torque.
            let mut xu = DMatrix::zeros(6, w + 3);
            let mut tau = DMatrix::zeros(3, w + 3);
            if w > 0 {
                xu.view_mut((0, 0), (6, w)).copy_from(&(mat(&st.a) * &xk.coef));
                tau.view_mut((0, 0), (3, w)).copy_from(&(mat(&st.torque.gx) * &xk.coef));
            }
            xu.view_mut((0, w), (6, 3)).copy_from(&mat(&st.b));
            tau.view_mut((0, w), (3, 3)).copy_from(&mat(&st.torque.gu));
            let next_c = st.a * xk.c + st.c + st.b * st.u_ref;
            let tau_c = st.torque.offset + st.torque.gu * st.u_ref + st.torque.gx * xk.c;

            let dynamics = if let Some(xc) = x_cols[k + 1] {
                // x_{k+1} - [A C | B] z = A e + c
                let mut coef = DMatrix::zeros(6, w + 3 + 6);
                coef.view_mut((0, 0), (6, w + 3)).copy_from(&(-&xu));
                coef.view_mut((0, w + 3), (6, 6)).copy_from(&DMatrix::identity(6, 6));
                debug_assert_eq!(start + w + 3, xc);
                let zero = DVector::zeros(6);
                t.rows(row, start, &coef, &zero, next_c.as_slice(), next_c.as_slice());
                let first = row;
                row += 6;
                Some(first)
            } else {
                None
            };
            t.rows(row, start, &tau, &vecd(&tau_c), self.tau_min.as_slice(), self.tau_max.as_slice());
            let torque_row = row;
            row += 3;

            let next = match x_cols[k + 1] {
                Some(xc) => StateExpr {
                    start: xc,
                    coef: DMatrix::identity(6, 6),
                    c: Vector6::zeros(),
                },
                None => StateExpr { start, coef: xu, c: next_c },
            };
            let rr = &self.rates[k];
            let rot = mat(&rr.rot) * &e_omega;
            let om = &rot * &next.coef;
            let om_c = &rot * vecd(&next.c);
            t.rows(row, next.start, &om, &om_c, rr.lo.as_slice(), rr.hi.as_slice());
            let rate_row = row;
            row += 3;
            rows.push(StageRows {
                dynamics,
                torque: torque_row,
                rate: rate_row,
            });
            states.push(next);
        }
        // Terminal cost and set.
        let xn = &states[n];
        constant += t.quad(&mut g, xn.start, &xn.coef, &p, &vecd(&xn.c));
        let terminal_rows = row;
        let th = &self.terminal_h * &xn.coef;
        let tc = &self.terminal_h * vecd(&xn.c);
        let lo = vec![-INFINITY; self.terminal_h.nrows()];
        t.rows(row, xn.start, &th, &tc, &lo, self.terminal_b.as_slice());
        row += self.terminal_h.nrows();

        let qp = QpProblem::new(
            CscMatrix::from_triplets(n_vars, n_vars, &t.h),
            g,
            CscMatrix::from_triplets(row, n_vars, &t.a),
            t.lower,
            t.upper,
        )?;
        Ok(HorizonQp {
            qp,
            recovery: Recovery {
                block,
                n_vars,
                states,
                u_cols,
                u_refs: self.stages.iter().map(|s| s.u_ref).collect(),
                x_cols,
                rows,
                terminal_rows,
                terminal_count: self.terminal_h.nrows(),
                objective_constant: constant,
            },
        })
    }
}
