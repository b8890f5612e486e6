//! Open-loop replay of a recorded run through a grid of controller cells.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::dynamics::BodyState;
use crate::error_system::LoopMode;
use crate::mpc::MpcController;
use crate::qp::{SolverKind, Status};

use super::config::{BlockSpec, Scenario};
use super::simulate::{simulate, ControlMode, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: LoopMode,
    pub solver: SolverKind,
    pub horizon: usize,
    pub block: BlockSpec,
}

impl Cell {
    pub fn block_size(&self) -> usize {
        self.block.resolve(self.horizon)
    }

    pub fn name(&self) -> String {
        format!("{}_{}_N{}_M{}", self.mode.as_str(), self.solver.as_str(), self.horizon, self.block.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub rep: usize,
    pub step: usize,
    pub t: f64,
    pub prep_seconds: f64,
    pub solve_seconds: f64,
    pub iterations: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub samples: Vec<Sample>,
    /// Set when the cell could not run at all.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub samples: usize,
    pub failures: usize,
    pub prep_geomean: f64,
    pub prep_max: f64,
    pub solve_geomean: f64,
    pub solve_max: f64,
    pub total_geomean: f64,
    pub mean_iterations: f64,
}

/// `exp(mean(ln t))`; non-positive entries are clamped to 1 ns.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let s: f64 = values.iter().map(|v| v.max(1e-9).ln()).sum();
    (s / values.len() as f64).exp()
}

impl CellResult {
    pub fn stats(&self) -> CellStats {
        let prep: Vec<f64> = self.samples.iter().map(|s| s.prep_seconds).collect();
        let solve: Vec<f64> = self.samples.iter().map(|s| s.solve_seconds).collect();
        let total: Vec<f64> = self.samples.iter().map(|s| s.prep_seconds + s.solve_seconds).collect();
        let n = self.samples.len();
        CellStats {
            samples: n,
            failures: self.samples.iter().filter(|s| s.status != Status::Solved).count(),
            prep_geomean: geometric_mean(&prep),
            prep_max: prep.iter().copied().fold(0.0, f64::max),
            solve_geomean: geometric_mean(&solve),
            solve_max: solve.iter().copied().fold(0.0, f64::max),
            total_geomean: geometric_mean(&total),
            mean_iterations: self.samples.iter().map(|s| s.iterations as f64).sum::<f64>() / n.max(1) as f64,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rep", "step", "t_s", "prep_s", "solve_s", "iterations", "status"])?;
        for s in &self.samples {
            out.write_record([
                s.rep.to_string(),
                s.step.to_string(),
                s.t.to_string(),
                s.prep_seconds.to_string(),
                s.solve_seconds.to_string(),
                s.iterations.to_string(),
                s.status.as_str().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkPlan {
    pub modes: Vec<LoopMode>,
    pub horizons: Vec<usize>,
    pub blocks: Vec<BlockSpec>,
    pub solvers: Vec<SolverKind>,
    pub reps: usize,
    pub threads: usize,
    /// Replayed steps; `None` uses the whole recorded run.
    pub steps: Option<usize>,
}

impl BenchmarkPlan {
    pub fn from_scenario(s: &Scenario) -> Self {
        let b = &s.config.benchmark;
        Self {
            modes: b.modes.iter().map(|m| m.parse().expect("validated")).collect(),
            horizons: b.horizons.clone(),
            blocks: b.blocks.clone(),
            solvers: b.solvers.iter().map(|m| m.parse().expect("validated")).collect(),
            reps: b.reps,
            threads: b.threads,
            steps: b.replay_duration_s.map(|d| (d / s.config.dt_s).round() as usize),
        }
    }

    /// Cells in mode, horizon, block, solver order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &horizon in &self.horizons {
                for block in &self.blocks {
                    for &solver in &self.solvers {
                        out.push(Cell {
                            mode,
                            solver,
                            horizon,
                            block: block.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Recorded states to replay for one mode.
#[derive(Debug, Clone)]
pub struct Recording {
    pub mode: LoopMode,
    pub states: Vec<BodyState>,
    pub fallbacks: usize,
}

/// Closed loop at the largest horizon, fully condensed, with the scenario solver.
pub fn record(scenario: &Scenario, mode: LoopMode, horizon: usize, steps: Option<usize>) -> Result<Recording, SimError> {
    let mut s = scenario.clone();
    if let Some(n) = steps {
        s.steps = s.steps.min(n);
    }
    let c = s.mpc_config_mut(mode);
    c.n_steps = horizon;
    c.condensing_block = horizon;
    let run = simulate(&s, ControlMode::Mpc(mode), s.solver, |_, _| {})?;
    Ok(Recording {
        mode,
        fallbacks: run.summary().fallbacks,
        states: run.states,
    })
}

fn run_cell(scenario: &Scenario, cell: &Cell, states: &[BodyState], reps: usize) -> CellResult {
    let mut config = scenario.mpc_config(cell.mode).clone();
    config.n_steps = cell.horizon;
    config.condensing_block = cell.block_size();
    let dt = scenario.config.dt_s;
    let mut samples = Vec::with_capacity(reps * states.len());
    for rep in 0..reps {
        let mut c = match MpcController::new(config.clone(), scenario.params.clone(), cell.solver, scenario.settings) {
            Ok(c) => c,
            Err(e) => {
                return CellResult {
                    cell: cell.clone(),
                    samples,
                    error: Some(e.to_string()),
                }
            }
        };
        for (k, state) in states.iter().enumerate() {
            let t = k as f64 * dt;
            match c.step(state, &scenario.reference, t) {
                Ok(sol) => samples.push(Sample {
                    rep,
                    step: k,
                    t,
                    prep_seconds: sol.stats.prep_seconds,
                    solve_seconds: sol.stats.solve_seconds,
                    iterations: sol.stats.iterations,
                    status: sol.stats.status,
                }),
                Err(e) => {
                    return CellResult {
                        cell: cell.clone(),
                        samples,
                        error: Some(format!("step {k}: {e}")),
                    }
                }
            }
        }
    }
    CellResult {
        cell: cell.clone(),
        samples,
        error: None,
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub recordings: Vec<Recording>,
    pub cells: Vec<CellResult>,
}

/// Records one run per mode and replays it through every cell on a worker pool.
pub fn run_benchmark(scenario: &Scenario, plan: &BenchmarkPlan) -> Result<BenchmarkReport, SimError> {
    let longest = plan.horizons.iter().copied().max().unwrap_or(1);
    let recordings = plan
        .modes
        .iter()
        .map(|&m| record(scenario, m, longest, plan.steps))
        .collect::<Result<Vec<_>, _>>()?;
    let cells = plan.cells();
    let threads = match plan.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(cells.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let rec = recordings.iter().find(|r| r.mode == cell.mode).expect("one recording per mode");
                let res = run_cell(scenario, cell, &rec.states, plan.reps);
                results.lock().expect("no worker panicked")[i] = Some(res);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    Ok(BenchmarkReport { recordings, cells })
}

impl BenchmarkReport {
    pub fn write_summary<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "mode",
            "solver",
            "horizon",
            "block",
            "block_size",
            "samples",
            "failures",
            "prep_geomean_s",
            "prep_max_s",
            "solve_geomean_s",
            "solve_max_s",
            "total_geomean_s",
            "mean_iterations",
            "error",
        ])?;
        for c in &self.cells {
            let s = c.stats();
            out.write_record([
                c.cell.mode.as_str().to_string(),
                c.cell.solver.as_str().to_string(),
                c.cell.horizon.to_string(),
                c.cell.block.label(),
                c.cell.block_size().to_string(),
                s.samples.to_string(),
                s.failures.to_string(),
                s.prep_geomean.to_string(),
                s.prep_max.to_string(),
                s.solve_geomean.to_string(),
                s.solve_max.to_string(),
                s.total_geomean.to_string(),
                s.mean_iterations.to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Per mode and horizon, the cell with the lowest total geometric mean
    /// among cells without failures.
    pub fn best_cells(&self) -> Vec<&CellResult> {
        let mut keys: Vec<(LoopMode, usize)> = self.cells.iter().map(|c| (c.cell.mode, c.cell.horizon)).collect();
        keys.dedup();
        let mut out = Vec::new();
        for (mode, horizon) in keys {
            if out.iter().any(|c: &&CellResult| c.cell.mode == mode && c.cell.horizon == horizon) {
                continue;
            }
            let best = self
                .cells
                .iter()
                .filter(|c| c.cell.mode == mode && c.cell.horizon == horizon && c.error.is_none() && c.stats().failures == 0)
                .min_by(|a, b| a.stats().total_geomean.total_cmp(&b.stats().total_geomean));
            if let Some(b) = best {
                out.push(b);
            }
        }
        out
    }

    pub fn write_best<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "horizon", "solver", "block", "total_geomean_s"])?;
        for c in self.best_cells() {
            out.write_record([
                c.cell.mode.as_str().to_string(),
                c.cell.horizon.to_string(),
                c.cell.solver.as_str().to_string(),
                c.cell.block.label(),
                c.stats().total_geomean.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn find(&self, mode: LoopMode, solver: SolverKind, horizon: usize, block: &BlockSpec) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.cell.mode == mode && c.cell.solver == solver && c.cell.horizon == horizon && &c.cell.block == block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_mean_of_three() {
        let g = geometric_mean(&[1e-3, 1e-2, 1e-1]);
        assert!((g - 1e-2).abs() < 1e-15);
        let g = geometric_mean(&[2.0, 8.0, 4.0]);
        assert!((g - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cell_count() {
        let plan = BenchmarkPlan {
            modes: vec![LoopMode::Single],
            horizons: vec![5, 10, 20, 40],
            blocks: vec![BlockSpec::Size(1), BlockSpec::Size(5), BlockSpec::full()],
            solvers: vec![SolverKind::Admm, SolverKind::ActiveSet],
            reps: 1,
            threads: 1,
            steps: None,
        };
        assert_eq!(plan.cells().len(), 24);
    }
}
