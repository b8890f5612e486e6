//! Closed-loop simulation of the scenario.

use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::dynamics::{BodyState, Simulator};
use crate::error_system::{stabilizer_torque, ErrorState, LoopMode};
use crate::mpc::{MpcController, MpcError};
use crate::qp::SolverKind;
use crate::reference::Reference;
use crate::so3::{RotationVector, So3Error, Vec3};

use super::config::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlMode {
    Mpc(LoopMode),
    Stabilizer,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Mpc(m) => m.as_str(),
            ControlMode::Stabilizer => "stabilizer",
        }
    }
}

impl FromStr for ControlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stabilizer" => Ok(ControlMode::Stabilizer),
            _ => s
                .parse::<LoopMode>()
                .map(ControlMode::Mpc)
                .map_err(|_| format!("unknown mode '{s}', expected single, dual or stabilizer")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub t: f64,
    pub error: ErrorState,
    pub omega: Vec3,
    pub tau: Vec3,
    /// Integral of `|tau|` up to `t`.
    pub effort: f64,
    pub lyapunov: f64,
    pub iterations: usize,
    pub prep_seconds: f64,
    pub solve_seconds: f64,
    pub fallback: bool,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub mode: ControlMode,
    pub solver: SolverKind,
    pub block: usize,
    pub rows: Vec<RunRow>,
    /// Plant state at each row.
    pub states: Vec<BodyState>,
}

pub const RUN_COLUMNS: [&str; 18] = [
    "t_s",
    "dphi_x_rad",
    "dphi_y_rad",
    "dphi_z_rad",
    "dphi_norm_rad",
    "omega_x_rad_s",
    "omega_y_rad_s",
    "omega_z_rad_s",
    "tau_x_nm",
    "tau_y_nm",
    "tau_z_nm",
    "effort_nms",
    "lyapunov",
    "iterations",
    "prep_s",
    "solve_s",
    "fallback",
    "clipped",
];

/// Columns holding wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 2] = ["prep_s", "solve_s"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub fallbacks: usize,
    pub clipped: usize,
    pub max_abs_rate: f64,
    pub max_abs_torque: f64,
    pub initial_error: f64,
    pub final_error: f64,
    pub effort: f64,
}

impl RunRecord {
    pub fn summary(&self) -> RunSummary {
        let first = self.rows.first();
        let last = self.rows.last();
        RunSummary {
            steps: self.rows.len().saturating_sub(1),
            fallbacks: self.rows.iter().filter(|r| r.fallback).count(),
            clipped: self.rows.iter().filter(|r| r.clipped).count(),
            max_abs_rate: self.rows.iter().map(|r| r.omega.abs().max()).fold(0.0, f64::max),
            max_abs_torque: self.rows.iter().map(|r| r.tau.abs().max()).fold(0.0, f64::max),
            initial_error: first.map_or(0.0, |r| r.error.dphi.norm()),
            final_error: last.map_or(0.0, |r| r.error.dphi.norm()),
            effort: last.map_or(0.0, |r| r.effort),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(RUN_COLUMNS)?;
        for r in &self.rows {
            let e = &r.error;
            let mut rec: Vec<String> = vec![r.t.to_string()];
            rec.extend(e.dphi.iter().map(f64::to_string));
            rec.push(e.dphi.norm().to_string());
            rec.extend(r.omega.iter().map(f64::to_string));
            rec.extend(r.tau.iter().map(f64::to_string));
            rec.push(r.effort.to_string());
            rec.push(r.lyapunov.to_string());
            rec.push(r.iterations.to_string());
            rec.push(r.prep_seconds.to_string());
            rec.push(r.solve_seconds.to_string());
            rec.push(u8::from(r.fallback).to_string());
            rec.push(u8::from(r.clipped).to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "steps            {}", self.steps)?;
        writeln!(f, "fallbacks        {}", self.fallbacks)?;
        writeln!(f, "clipped steps    {}", self.clipped)?;
        writeln!(f, "max |omega_i|    {:.6} rad/s", self.max_abs_rate)?;
        writeln!(f, "max |tau_i|      {:.6} N m", self.max_abs_torque)?;
        writeln!(f, "|dphi(0)|        {:.6} rad", self.initial_error)?;
        writeln!(f, "|dphi(end)|      {:.6e} rad", self.final_error)?;
        write!(f, "effort           {:.6} N m s", self.effort)
    }
}

/// Runs `mode` for the scenario duration.
///
/// MPC modes hold the first torque over each step. The stabilizer is
/// evaluated at every integrator stage and is not saturated, so the
/// Lyapunov decrease holds for the sampled plant.
pub fn simulate(
    scenario: &Scenario,
    mode: ControlMode,
    solver: SolverKind,
    mut on_fallback: impl FnMut(usize, &str),
) -> Result<RunRecord, SimError> {
    let dt = scenario.config.dt_s;
    let reference = &scenario.reference;
    let gains = scenario.gains;
    let mut sim = Simulator::new(scenario.params.clone(), scenario.initial_state());
    let mut controller = match mode {
        ControlMode::Mpc(m) => Some(MpcController::new(
            scenario.mpc_config(m).clone(),
            scenario.params.clone(),
            solver,
            scenario.settings,
        )?),
        ControlMode::Stabilizer => None,
    };
    let block = match mode {
        ControlMode::Mpc(m) => scenario.mpc_config(m).condensing_block,
        ControlMode::Stabilizer => 0,
    };
    let mut hint = RotationVector::zero();
    let mut rows = Vec::with_capacity(scenario.steps + 1);
    let mut states = Vec::with_capacity(scenario.steps + 1);
    let mut effort = 0.0;
    for k in 0..=scenario.steps {
        let t = k as f64 * dt;
        let state = sim.state;
        let (tau, e, iterations, prep, solve, fallback, clipped) = match controller.as_mut() {
            Some(c) => {
                let sol = c.step(&state, reference, t)?;
                if sol.fallback {
                    on_fallback(k, sol.stats.status.as_str());
                }
                (
                    sol.applied_torque,
                    sol.error,
                    sol.stats.iterations,
                    sol.stats.prep_seconds,
                    sol.stats.solve_seconds,
                    sol.fallback,
                    sol.clipped,
                )
            }
            None => {
                let (tau, e) = stabilizer_torque(&scenario.params, &state, &reference.sample(t), &gains, &Vec3::zeros(), &hint)?;
                (tau, e, 0, 0.0, 0.0, false, false)
            }
        };
        hint = RotationVector(e.dphi);
        rows.push(RunRow {
            t,
            error: e,
            omega: state.omega,
            tau,
            effort,
            lyapunov: e.lyapunov(&gains),
            iterations,
            prep_seconds: prep,
            solve_seconds: solve,
            fallback,
            clipped,
        });
        states.push(state);
        if k == scenario.steps {
            break;
        }
        effort += tau.norm() * dt;
        match mode {
            ControlMode::Mpc(_) => {
                sim.step(&tau, dt);
            }
            ControlMode::Stabilizer => {
                let mut failure = None;
                let params = scenario.params.clone();
                sim.step_feedback(dt, |off, s| {
                    match stabilizer_torque(&params, s, &reference.sample(t + off), &gains, &Vec3::zeros(), &hint) {
                        Ok((tau, _)) => tau,
                        Err(err) => {
                            failure.get_or_insert(err);
                            Vec3::zeros()
                        }
                    }
                })?;
                if let Some(err) = failure {
                    return Err(err.into());
                }
            }
        }
    }
    Ok(RunRecord {
        mode,
        solver,
        block,
        rows,
        states,
    })
}
