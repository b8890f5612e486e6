//! Convex QPs `min 1/2 x^T H x + g^T x  s.t.  l <= A x <= u` and two solvers:
//! an operator-splitting method for sparse problems and a dense primal
//! active-set method for condensed ones.
//!
//! Duals follow the sign convention `H x + g + A^T y = 0`, so `y_i > 0` at an
//! active upper bound and `y_i < 0` at an active lower bound.

pub mod active_set;
pub mod admm;
pub mod csc;
pub mod ldl;
pub mod text;
pub mod verify;

use nalgebra::DMatrix;
use thiserror::Error;

pub use active_set::ActiveSetSolver;
pub use admm::AdmmSolver;
pub use csc::CscMatrix;

/// Sentinel for a missing bound.
pub const INFINITY: f64 = 1e30;

/// Bounds at or beyond this magnitude are treated as infinite.
pub const INFINITY_THRESHOLD: f64 = 1e29;

pub fn is_infinite(b: f64) -> bool {
    b.abs() >= INFINITY_THRESHOLD
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("row {row}: lower bound {lower} exceeds upper bound {upper}")]
    InconsistentBounds { row: usize, lower: f64, upper: f64 },
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
    #[error("hessian must be stored as its upper triangle")]
    NotUpperTriangular,
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("hessian is not positive definite after regularization")]
    NotPositiveDefinite,
}

/// Problem data. `hessian` stores the upper triangle of the symmetric `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: CscMatrix,
    pub grad: Vec<f64>,
    pub a: CscMatrix,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    pub fn new(
        hessian: CscMatrix,
        grad: Vec<f64>,
        a: CscMatrix,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = grad.len();
        let m = lower.len();
        if hessian.nrows != n || hessian.ncols != n {
            return Err(QpError::Dimension(format!(
                "hessian is {}x{}, gradient has {n} entries",
                hessian.nrows, hessian.ncols
            )));
        }
        if a.ncols != n || a.nrows != m || upper.len() != m {
            return Err(QpError::Dimension(format!(
                "constraints are {}x{} with {} lower and {} upper bounds for {n} variables",
                a.nrows,
                a.ncols,
                m,
                upper.len()
            )));
        }
        if !hessian.is_upper_triangular() {
            return Err(QpError::NotUpperTriangular);
        }
        if hessian.values.iter().chain(&grad).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("cost"));
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("constraint matrix"));
        }
        for (row, (&lower, &upper)) in lower.iter().zip(&upper).enumerate() {
            if lower.is_nan() || upper.is_nan() {
                return Err(QpError::NonFinite("bounds"));
            }
            if lower > upper {
                return Err(QpError::InconsistentBounds { row, lower, upper });
            }
        }
        let clamp = |v: f64| v.clamp(-INFINITY, INFINITY);
        Ok(Self {
            hessian,
            grad,
            a,
            lower: lower.into_iter().map(clamp).collect(),
            upper: upper.into_iter().map(clamp).collect(),
        })
    }

    /// From a dense symmetric hessian and dense constraint matrix.
    pub fn from_dense(
        h: &DMatrix<f64>,
        g: &[f64],
        a: &DMatrix<f64>,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Self, QpError> {
        let a = if a.nrows() == 0 {
            CscMatrix::zeros(0, g.len())
        } else {
            CscMatrix::from_dense(a, 0.0)
        };
        Self::new(
            CscMatrix::upper_from_dense(h, 0.0),
            g.to_vec(),
            a,
            lower.to_vec(),
            upper.to_vec(),
        )
    }

    pub fn n(&self) -> usize {
        self.grad.len()
    }

    pub fn m(&self) -> usize {
        self.lower.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut hx = vec![0.0; self.n()];
        self.hessian.symv_upper(1.0, x, 0.0, &mut hx);
        x.iter().zip(&hx).map(|(a, b)| 0.5 * a * b).sum::<f64>()
            + x.iter().zip(&self.grad).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Number of rows with `lower == upper`.
    pub fn equality_count(&self) -> usize {
        self.lower.iter().zip(&self.upper).filter(|(l, u)| l == u).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// `None` selects the solver default: 20000 for ADMM, `max(10 n, 50)`
    /// for the active-set method.
    pub max_iter: Option<usize>,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub check_every: usize,
    pub scaling_iters: usize,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    /// Refine the ADMM result on its guessed active set. Allocates.
    pub polish: bool,
    pub time_limit: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: None,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            check_every: 25,
            scaling_iters: 10,
            eps_prim_inf: 1e-7,
            eps_dual_inf: 1e-7,
            polish: false,
            time_limit: None,
        }
    }
}

impl SolverSettings {
    pub fn tight(eps: f64) -> Self {
        Self {
            eps_abs: eps,
            eps_rel: eps,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Solved,
    MaxIter,
    TimeLimit,
    /// Primal infeasible.
    Infeasible,
    /// Dual infeasible: the objective is unbounded below.
    Unbounded,
    NumericalError,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Solved => "solved",
            Status::MaxIter => "max_iter",
            Status::TimeLimit => "time_limit",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::NumericalError => "error",
        }
    }
}

/// Summary of one solve; the iterate is read through the solver accessors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub status: Status,
    pub iterations: usize,
    pub objective: f64,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
}

/// Owned copy of a solve result.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub duals: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    pub objective: f64,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct WarmStart<'a> {
    pub x: &'a [f64],
    pub y: Option<&'a [f64]>,
}

pub trait QpSolver {
    /// Solves from the warm start if given, otherwise from the previous
    /// iterate (zero on the first call). Does not allocate unless polishing.
    fn solve(&mut self, warm: Option<WarmStart<'_>>) -> SolveInfo;
    fn x(&self) -> &[f64];
    fn duals(&self) -> &[f64];
    fn update_gradient(&mut self, grad: &[f64]);
    fn update_bounds(&mut self, lower: &[f64], upper: &[f64]) -> Result<(), QpError>;
    fn setup_seconds(&self) -> f64;

    fn solution(&self, info: &SolveInfo) -> QpSolution {
        QpSolution {
            x: self.x().to_vec(),
            duals: self.duals().to_vec(),
            status: info.status,
            iterations: info.iterations,
            objective: info.objective,
            setup_seconds: info.setup_seconds,
            solve_seconds: info.solve_seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Admm,
    ActiveSet,
}

impl SolverKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Admm => "admm",
            SolverKind::ActiveSet => "active-set",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "admm" => Ok(SolverKind::Admm),
            "active-set" | "active_set" => Ok(SolverKind::ActiveSet),
            _ => Err(format!("unknown solver '{s}', expected admm or active-set")),
        }
    }
}

/// Either solver behind one type.
#[derive(Debug, Clone)]
pub enum Solver {
    Admm(AdmmSolver),
    ActiveSet(ActiveSetSolver),
}

impl Solver {
    pub fn setup(kind: SolverKind, qp: &QpProblem, settings: &SolverSettings) -> Result<Self, QpError> {
        Ok(match kind {
            SolverKind::Admm => Solver::Admm(AdmmSolver::setup(qp, settings)?),
            SolverKind::ActiveSet => Solver::ActiveSet(ActiveSetSolver::setup(qp, settings)?),
        })
    }

    fn inner(&self) -> &dyn QpSolver {
        match self {
            Solver::Admm(s) => s,
            Solver::ActiveSet(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn QpSolver {
        match self {
            Solver::Admm(s) => s,
            Solver::ActiveSet(s) => s,
        }
    }
}

impl QpSolver for Solver {
    fn solve(&mut self, warm: Option<WarmStart<'_>>) -> SolveInfo {
        self.inner_mut().solve(warm)
    }
    fn x(&self) -> &[f64] {
        self.inner().x()
    }
    fn duals(&self) -> &[f64] {
        self.inner().duals()
    }
    fn update_gradient(&mut self, grad: &[f64]) {
        self.inner_mut().update_gradient(grad)
    }
    fn update_bounds(&mut self, lower: &[f64], upper: &[f64]) -> Result<(), QpError> {
        self.inner_mut().update_bounds(lower, upper)
    }
    fn setup_seconds(&self) -> f64 {
        self.inner().setup_seconds()
    }
}

/// Setup and solve in one call.
pub fn solve(kind: SolverKind, qp: &QpProblem, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    let mut s = Solver::setup(kind, qp, settings)?;
    let info = s.solve(None);
    Ok(s.solution(&info))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
