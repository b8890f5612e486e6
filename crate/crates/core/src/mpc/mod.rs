//! Receding-horizon attitude controllers.

mod builder;

pub use builder::{
    build_dual_loop, build_single_loop, BuildError, HorizonQp, RateRows, Recovery, Stage, StageRows,
    StagedProblem, StateExpr,
};

use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, Matrix6x3, Vector6};
use thiserror::Error;

use crate::dynamics::{momentum_body, BodyState, SpacecraftParams};
use crate::error_system::{
    compute_error, discretize_lpv, discretize_lti, lpv_continuous, stabilizer_torque_from_error, ErrorState,
    Gains, LoopMode, LtiModel,
};
use crate::qp::{QpError, QpSolver, Solver, SolverKind, SolverSettings, Status, WarmStart};
use crate::reference::{sample_grid, Reference, ReferenceGrid, ReferenceSample};
use crate::so3::{RotationVector, So3Error, Vec3};
use crate::terminal::{terminal_constraint_polytope, TerminalError, TerminalSet};

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub n_steps: usize,
    pub dt: f64,
    pub q: Matrix6<f64>,
    pub r_input: Matrix3<f64>,
    pub mode: LoopMode,
    pub gains: Gains,
    pub condensing_block: usize,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("horizon must be at least one step")]
    EmptyHorizon,
    #[error("time step must be positive and finite, got {0}")]
    Step(f64),
    #[error("condensing block {block} outside 1..={n}")]
    Block { block: usize, n: usize },
    #[error("{0} weight is not symmetric")]
    Asymmetric(&'static str),
    #[error("{0} weight is not {1}")]
    Definiteness(&'static str, &'static str),
    #[error("gains must be positive, got k_c={k_c}, k_omega={k_omega}")]
    Gains { k_c: f64, k_omega: f64 },
}

impl MpcConfig {
    /// Torque-input controller: `Q = diag(2, 2, 2, 3, 3, 3)`, `R = 5 J^-2`.
    pub fn single_loop(params: &SpacecraftParams, gains: Gains) -> Self {
        let jinv = params.inertia_inv();
        Self {
            n_steps: 11,
            dt: 0.1,
            q: Matrix6::from_diagonal(&Vector6::new(2.0, 2.0, 2.0, 3.0, 3.0, 3.0)),
            r_input: jinv.transpose() * jinv * 5.0,
            mode: LoopMode::Single,
            gains,
            condensing_block: 1,
        }
    }

    /// Outer-loop controller: `Q = diag(10, 10, 10, 1, 1, 1)`, `R = 100 I`.
    pub fn dual_loop(gains: Gains) -> Self {
        Self {
            n_steps: 11,
            dt: 0.1,
            q: Matrix6::from_diagonal(&Vector6::new(10.0, 10.0, 10.0, 1.0, 1.0, 1.0)),
            r_input: Matrix3::identity() * 100.0,
            mode: LoopMode::Dual,
            gains,
            condensing_block: 1,
        }
    }

    pub fn for_mode(mode: LoopMode, params: &SpacecraftParams, gains: Gains) -> Self {
        match mode {
            LoopMode::Single => Self::single_loop(params, gains),
            LoopMode::Dual => Self::dual_loop(gains),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_steps == 0 {
            return Err(ConfigError::EmptyHorizon);
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ConfigError::Step(self.dt));
        }
        if self.condensing_block == 0 || self.condensing_block > self.n_steps {
            return Err(ConfigError::Block {
                block: self.condensing_block,
                n: self.n_steps,
            });
        }
        let sym_tol = |m: f64| 1e-12 * (1.0 + m);
        if (self.q - self.q.transpose()).abs().max() > sym_tol(self.q.abs().max()) {
            return Err(ConfigError::Asymmetric("state"));
        }
        if (self.r_input - self.r_input.transpose()).abs().max() > sym_tol(self.r_input.abs().max()) {
            return Err(ConfigError::Asymmetric("input"));
        }
        if self.q.symmetric_eigenvalues().min() < -1e-12 {
            return Err(ConfigError::Definiteness("state", "positive semidefinite"));
        }
        if self.r_input.symmetric_eigenvalues().min() <= 0.0 {
            return Err(ConfigError::Definiteness("input", "positive definite"));
        }
        let g = &self.gains;
        if !(g.k_c > 0.0 && g.k_omega > 0.0) {
            return Err(ConfigError::Gains {
                k_c: g.k_c,
                k_omega: g.k_omega,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error("terminal ingredients: {0}")]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("solver setup: {0}")]
    Solver(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub status: Status,
    pub iterations: usize,
    pub prep_seconds: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `tau_0` in single-loop mode, `dalpha_0` in dual-loop mode.
    pub first_input: Vec3,
    pub applied_torque: Vec3,
    pub error: ErrorState,
    /// `x_0 .. x_N`.
    pub predicted_states: Vec<ErrorState>,
    pub inputs: Vec<Vec3>,
    pub stats: StepStats,
    /// The QP was not solved and the stabilizer torque was applied.
    pub fallback: bool,
    /// The torque left the box and was clipped.
    pub clipped: bool,
}

/// Terminal ingredients and the model they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub set: TerminalSet,
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
}

/// Computes `P`, `K` and `X` for the model at `sample`.
pub fn terminal_ingredients(
    config: &MpcConfig,
    params: &SpacecraftParams,
    sample: &ReferenceSample,
    l_body: &Vec3,
) -> Result<TerminalIngredients, TerminalError> {
    let (a, b) = match config.mode {
        LoopMode::Single => {
            let m = discretize_lpv(&lpv_continuous(params, sample, l_body), config.dt);
            (m.a, m.b)
        }
        LoopMode::Dual => {
            let m = discretize_lti(&config.gains, config.dt);
            (m.a, m.b)
        }
    };
    let set = TerminalSet::compute(&a, &b, &config.q, &config.r_input, |k| {
        terminal_constraint_polytope(params, sample, l_body, k, config.mode, &config.gains)
    })?;
    Ok(TerminalIngredients { set, a, b })
}

#[derive(Debug, Clone)]
struct Previous {
    states: Vec<Vector6<f64>>,
    inputs: Vec<Vec3>,
    duals: Vec<f64>,
    recovery: Recovery,
    last_stage: Stage,
}

/// One controller instance; holds the branch hint and warm start.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    pub params: SpacecraftParams,
    pub solver: SolverKind,
    pub settings: SolverSettings,
    terminal: Option<TerminalIngredients>,
    lti: LtiModel,
    hint: RotationVector,
    previous: Option<Previous>,
    warm_x: Vec<f64>,
    warm_y: Vec<f64>,
}

impl MpcController {
    pub fn new(
        config: MpcConfig,
        params: SpacecraftParams,
        solver: SolverKind,
        settings: SolverSettings,
    ) -> Result<Self, MpcError> {
        config.validate()?;
        let lti = discretize_lti(&config.gains, config.dt);
        Ok(Self {
            config,
            params,
            solver,
            settings,
            terminal: None,
            lti,
            hint: RotationVector::zero(),
            previous: None,
            warm_x: Vec::new(),
            warm_y: Vec::new(),
        })
    }

    /// Fixes the terminal ingredients instead of deriving them on the first step.
    pub fn with_terminal(mut self, terminal: TerminalIngredients) -> Self {
        self.terminal = Some(terminal);
        self
    }

    pub fn terminal(&self) -> Option<&TerminalIngredients> {
        self.terminal.as_ref()
    }

    pub fn set_hint(&mut self, hint: RotationVector) {
        self.hint = hint;
    }

    /// Drops the warm start and the branch hint.
    pub fn reset(&mut self) {
        self.previous = None;
        self.hint = RotationVector::zero();
    }

    /// Horizon problem at `t`, with the error computed against the current hint.
    pub fn build(&mut self, state: &BodyState, reference: &dyn Reference, t: f64) -> Result<(StagedProblem, ErrorState, ReferenceGrid), MpcError> {
        let grid = sample_grid(reference, t, self.config.dt, self.config.n_steps);
        let l_body = momentum_body(state);
        if self.terminal.is_none() {
            self.terminal = Some(terminal_ingredients(&self.config, &self.params, &grid.samples[self.config.n_steps], &l_body)?);
        }
        let e = compute_error(state, &grid.samples[0], &self.hint)?;
        let terminal = &self.terminal.as_ref().expect("terminal ingredients set above").set;
        let staged = match self.config.mode {
            LoopMode::Single => build_single_loop(&self.config, &e, &grid, &self.params, &l_body, terminal)?,
            LoopMode::Dual => build_dual_loop(&self.config, &e, &grid, &self.params, &l_body, terminal, &self.lti)?,
        };
        Ok((staged, e, grid))
    }

    pub fn step(&mut self, state: &BodyState, reference: &dyn Reference, t: f64) -> Result<MpcSolution, MpcError> {
        if self.terminal.is_none() {
            // Initialization is not part of the per-step preparation time.
            self.build(state, reference, t)?;
        }
        let start = Instant::now();
        let (staged, e, grid) = self.build(state, reference, t)?;
        let hqp = staged.condense(self.config.condensing_block)?;
        let prep_seconds = start.elapsed().as_secs_f64();

        let has_warm = self.fill_warm_start(&hqp.recovery);
        let solve_start = Instant::now();
        let mut solver = Solver::setup(self.solver, &hqp.qp, &self.settings)?;
        let warm = has_warm.then(|| WarmStart {
            x: &self.warm_x,
            y: Some(&self.warm_y),
        });
        let info = solver.solve(warm);
        let solve_seconds = solve_start.elapsed().as_secs_f64();
        self.hint = RotationVector(e.dphi);

        let sample = &grid.samples[0];
        let z = solver.x();
        let fallback = info.status != Status::Solved;
        let first_input = if fallback { Vec3::zeros() } else { hqp.recovery.first_input(z) };
        let torque = match (self.config.mode, fallback) {
            (LoopMode::Single, false) => first_input,
            _ => stabilizer_torque_from_error(&self.params, state, sample, &self.config.gains, &first_input, &e),
        };
        let applied = self.params.clip_torque(&torque);
        let clipped = (applied - torque).abs().max() > 0.0;

        let (states, inputs) = if fallback {
            self.previous = None;
            (vec![e.to_vector()], Vec::new())
        } else {
            let states = hqp.recovery.predicted_states(z);
            let inputs = hqp.recovery.inputs(z);
            self.previous = Some(Previous {
                states: states.clone(),
                inputs: inputs.clone(),
                duals: solver.duals().to_vec(),
                recovery: hqp.recovery.clone(),
                last_stage: staged.stages[staged.n_steps() - 1].clone(),
            });
            (states, inputs)
        };
        Ok(MpcSolution {
            first_input,
            applied_torque: applied,
            error: e,
            predicted_states: states.iter().map(ErrorState::from_vector).collect(),
            inputs,
            stats: StepStats {
                status: info.status,
                iterations: info.iterations,
                prep_seconds,
                solve_seconds,
            },
            fallback,
            clipped,
        })
    }

    /// Shifted previous solution with the tail driven by the terminal feedback.
    fn fill_warm_start(&mut self, recovery: &Recovery) -> bool {
        let (Some(prev), Some(term)) = (&self.previous, &self.terminal) else {
            return false;
        };
        let n = self.config.n_steps;
        if prev.inputs.len() != n {
            return false;
        }
        let x_n = prev.states[n];
        let last = &prev.last_stage;
        let u_tail = last.u_ref + term.set.k_gain * x_n;
        let mut inputs: Vec<Vec3> = prev.inputs[1..].to_vec();
        inputs.push(u_tail);
        let mut states: Vec<Vector6<f64>> = prev.states[1..].to_vec();
        states.push(last.a * x_n + last.b * u_tail + last.c);
        self.warm_x = recovery.pack(&states, &inputs);
        self.warm_y.resize(recovery_rows(recovery), 0.0);
        recovery.shift_duals(&prev.recovery, &prev.duals, &mut self.warm_y);
        true
    }
}

fn recovery_rows(r: &Recovery) -> usize {
    r.terminal_rows + r.terminal_count
}
