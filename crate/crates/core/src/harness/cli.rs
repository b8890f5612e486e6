//! `attmpc` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or input, 3 solver failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::dynamics::momentum_body;
use crate::error_system::LoopMode;
use crate::mpc::{terminal_ingredients, MpcController};
use crate::qp::text::parse_qp;
use crate::qp::verify::check_kkt;
use crate::qp::{QpSolver, Solver, SolverKind, SolverSettings, Status};
use crate::reference::Reference;
use crate::terminal::dare_residual;

use super::benchmark::{run_benchmark, BenchmarkPlan};
use super::config::{BlockSpec, Scenario, ScenarioConfig};
use super::plot::{Plot, Series};
use super::simulate::{simulate, ControlMode, RunRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "attmpc", version, about = "Attitude tracking MPC harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-loop simulation with CSV and SVG output.
    Simulate(SimulateArgs),
    /// Horizon, condensing and solver sweep over a replayed run.
    Benchmark(BenchmarkArgs),
    /// Terminal cost, gain and invariant set.
    TerminalSet(TerminalArgs),
    /// Solve a QP in the text exchange format.
    Solve(SolveArgs),
    /// Write the first-step QP of the scenario in the text exchange format.
    ExportQp(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Scenario TOML; the built-in reference scenario when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value = "dual", value_parser = parse_control_mode)]
    pub mode: ControlMode,
    #[arg(long)]
    pub solver: Option<SolverKind>,
    /// Condensing block size or `full`.
    #[arg(long, value_parser = BlockSpec::parse)]
    pub block: Option<BlockSpec>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_control_mode(s: &str) -> Result<ControlMode, String> {
    s.parse()
}

fn parse_list<T, E: std::fmt::Display>(s: &str, f: impl Fn(&str) -> Result<T, E>) -> Result<Vec<T>, String> {
    s.split(',').map(|p| f(p.trim()).map_err(|e| e.to_string())).collect()
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Comma-separated horizons, e.g. `5,10,20,40`.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Comma-separated blocks, e.g. `1,5,full`.
    #[arg(long)]
    pub blocks: Option<String>,
    /// Comma-separated solvers.
    #[arg(long)]
    pub solvers: Option<String>,
    /// Comma-separated loop modes.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TerminalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value = "dual")]
    pub mode: LoopMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SettingsArgs {
    #[arg(long)]
    pub eps_abs: Option<f64>,
    #[arg(long)]
    pub eps_rel: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub polish: bool,
    #[arg(long)]
    pub time_limit: Option<f64>,
}

impl SettingsArgs {
    fn apply(&self, mut s: SolverSettings) -> SolverSettings {
        if let Some(v) = self.eps_abs {
            s.eps_abs = v;
        }
        if let Some(v) = self.eps_rel {
            s.eps_rel = v;
        }
        if self.max_iter.is_some() {
            s.max_iter = self.max_iter;
        }
        if let Some(v) = self.rho {
            s.rho = v;
        }
        s.polish |= self.polish;
        if self.time_limit.is_some() {
            s.time_limit = self.time_limit;
        }
        s
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub qp: PathBuf,
    #[arg(long, default_value = "active-set")]
    pub solver: SolverKind,
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Print the primal solution.
    #[arg(long)]
    pub print_solution: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value = "dual")]
    pub mode: LoopMode,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_parser = BlockSpec::parse)]
    pub block: Option<BlockSpec>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn solver(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_SOLVER,
            message: e.to_string(),
        }
    }
}

fn load(arg: &ConfigArg) -> Result<ScenarioConfig, CliError> {
    match &arg.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| CliError::config(format!("{}: {e}", p.display()))),
        None => Ok(ScenarioConfig::default()),
    }
}

fn validate(c: &ScenarioConfig) -> Result<Scenario, CliError> {
    c.validate().map_err(CliError::config)
}

fn out_dir(out: &Option<PathBuf>, c: &ScenarioConfig) -> Result<PathBuf, CliError> {
    let dir = out.clone().unwrap_or_else(|| c.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::config(format!("output: {e}"))
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cmd: &Command) -> Result<i32, CliError> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::TerminalSet(a) => cmd_terminal(a),
        Command::Solve(a) => cmd_solve(a),
        Command::ExportQp(a) => cmd_export(a),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32, CliError> {
    let mut config = load(&a.config)?;
    if let Some(s) = a.solver {
        config.solver = s.as_str().to_string();
    }
    if let Some(b) = &a.block {
        config.condensing_block = b.clone();
    }
    let scenario = validate(&config)?;
    let dir = out_dir(&a.out, &config)?;
    let run = simulate(&scenario, a.mode, scenario.solver, |k, status| {
        eprintln!("step {k}: solver status {status}, stabilizer fallback applied");
    })
    .map_err(CliError::solver)?;
    let name = a.mode.as_str();
    run.write_csv(create(&dir.join(format!("run_{name}.csv")))?).map_err(io_err)?;
    write_plots(&run, &scenario, &dir, name)?;
    println!("mode             {name}");
    if let ControlMode::Mpc(_) = a.mode {
        println!("solver           {}", run.solver.as_str());
        println!("condensing block {}", run.block);
    }
    println!("{}", run.summary());
    println!("outputs          {}", dir.display());
    Ok(EXIT_OK)
}

fn write_plots(run: &RunRecord, scenario: &Scenario, dir: &Path, name: &str) -> Result<(), CliError> {
    let t: Vec<f64> = run.rows.iter().map(|r| r.t).collect();
    let series = |label: &'static str, f: &dyn Fn(usize) -> f64| Series {
        name: label,
        points: t.iter().enumerate().map(|(i, &x)| (x, f(i))).collect(),
    };
    let p = &scenario.params;
    let mut rate_bounds: Vec<f64> = p.omega_min.iter().chain(p.omega_max.iter()).copied().collect();
    rate_bounds.dedup();
    let mut tau_bounds: Vec<f64> = p.tau_min.iter().chain(p.tau_max.iter()).copied().collect();
    tau_bounds.dedup();
    let plots = [
        (
            "dphi_norm",
            Plot {
                title: "attitude error",
                x_label: "t [s]",
                y_label: "|dphi| [rad]",
                series: vec![series("|dphi|", &|i| run.rows[i].error.dphi.norm())],
                bounds: vec![],
                log_y: false,
            },
        ),
        (
            "omega",
            Plot {
                title: "body rate",
                x_label: "t [s]",
                y_label: "omega [rad/s]",
                series: vec![
                    series("omega_x", &|i| run.rows[i].omega.x),
                    series("omega_y", &|i| run.rows[i].omega.y),
                    series("omega_z", &|i| run.rows[i].omega.z),
                ],
                bounds: rate_bounds,
                log_y: false,
            },
        ),
        (
            "torque",
            Plot {
                title: "applied torque",
                x_label: "t [s]",
                y_label: "tau [N m]",
                series: vec![
                    series("tau_x", &|i| run.rows[i].tau.x),
                    series("tau_y", &|i| run.rows[i].tau.y),
                    series("tau_z", &|i| run.rows[i].tau.z),
                ],
                bounds: tau_bounds,
                log_y: false,
            },
        ),
        (
            "lyapunov",
            Plot {
                title: "Lyapunov function",
                x_label: "t [s]",
                y_label: "V",
                series: vec![series("V", &|i| run.rows[i].lyapunov)],
                bounds: vec![],
                log_y: true,
            },
        ),
    ];
    for (file, plot) in plots {
        let path = dir.join(format!("{name}_{file}.svg"));
        fs::write(&path, plot.to_svg()).map_err(|e| io_err(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<i32, CliError> {
    let mut config = load(&a.config)?;
    let b = &mut config.benchmark;
    let usage = |e: String| CliError { code: EXIT_USAGE, message: e };
    if let Some(s) = &a.horizons {
        b.horizons = parse_list(s, |p| p.parse::<usize>()).map_err(usage)?;
    }
    if let Some(s) = &a.blocks {
        b.blocks = parse_list(s, BlockSpec::parse).map_err(usage)?;
    }
    if let Some(s) = &a.solvers {
        b.solvers = parse_list(s, |p| p.parse::<SolverKind>().map(|k| k.as_str().to_string())).map_err(usage)?;
    }
    if let Some(s) = &a.modes {
        b.modes = parse_list(s, |p| p.parse::<LoopMode>().map(|m| m.as_str().to_string())).map_err(usage)?;
    }
    if let Some(r) = a.reps {
        b.reps = r;
    }
    if let Some(t) = a.threads {
        b.threads = t;
    }
    let scenario = validate(&config)?;
    let dir = out_dir(&a.out, &config)?;
    let plan = BenchmarkPlan::from_scenario(&scenario);
    let report = run_benchmark(&scenario, &plan).map_err(CliError::solver)?;
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(io_err)?;
    for c in &report.cells {
        c.write_csv(create(&cells_dir.join(format!("{}.csv", c.cell.name())))?).map_err(io_err)?;
    }
    report.write_summary(create(&dir.join("benchmark_summary.csv"))?).map_err(io_err)?;
    report.write_best(create(&dir.join("benchmark_best.csv"))?).map_err(io_err)?;
    for r in &report.recordings {
        println!("recorded {} run: {} states, {} fallbacks", r.mode.as_str(), r.states.len(), r.fallbacks);
    }
    println!("{:<7} {:<11} {:>4} {:>5} {:>9} {:>12} {:>12} {:>12}", "mode", "solver", "N", "M", "failures", "prep gm [s]", "solve gm [s]", "solve max");
    for c in &report.cells {
        let s = c.stats();
        println!(
            "{:<7} {:<11} {:>4} {:>5} {:>9} {:>12.3e} {:>12.3e} {:>12.3e}{}",
            c.cell.mode.as_str(),
            c.cell.solver.as_str(),
            c.cell.horizon,
            c.cell.block.label(),
            s.failures,
            s.prep_geomean,
            s.solve_geomean,
            s.solve_max,
            c.error.as_ref().map(|e| format!("  error: {e}")).unwrap_or_default()
        );
    }
    println!("best cell per horizon:");
    for c in report.best_cells() {
        println!(
            "  {} N={}: {} M={} ({:.3e} s)",
            c.cell.mode.as_str(),
            c.cell.horizon,
            c.cell.solver.as_str(),
            c.cell.block.label(),
            c.stats().total_geomean
        );
    }
    println!("outputs in {}", dir.display());
    Ok(EXIT_OK)
}

fn to_dmatrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(create(path)?);
    for i in 0..m.nrows() {
        out.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn cmd_terminal(a: &TerminalArgs) -> Result<i32, CliError> {
    let config = load(&a.config)?;
    let scenario = validate(&config)?;
    let dir = out_dir(&a.out, &config)?;
    let mpc = scenario.mpc_config(a.mode);
    let state = scenario.initial_state();
    let sample = scenario.reference.sample(mpc.n_steps as f64 * mpc.dt);
    let term = terminal_ingredients(mpc, &scenario.params, &sample, &momentum_body(&state)).map_err(CliError::solver)?;
    let set = &term.set;
    let residual = dare_residual(&to_dmatrix(&term.a), &to_dmatrix(&term.b), &to_dmatrix(&mpc.q), &to_dmatrix(&mpc.r_input), &to_dmatrix(&set.p));
    let name = a.mode.as_str();
    write_matrix(&dir.join(format!("terminal_{name}_P.csv")), &to_dmatrix(&set.p))?;
    write_matrix(&dir.join(format!("terminal_{name}_K.csv")), &to_dmatrix(&set.k_gain))?;
    set.x_set.write_csv(create(&dir.join(format!("terminal_{name}_X.csv")))?).map_err(io_err)?;
    println!("mode              {name}");
    println!("k_omega           {}", mpc.gains.k_omega);
    println!("k_c               {}", mpc.gains.k_c);
    println!("spectral radius   {:.6}", set.spectral_radius);
    println!("stable            {}", set.spectral_radius < 1.0);
    println!("DARE residual     {residual:.3e}");
    println!("rows of X         {}", set.x_set.rows());
    if let Ok((lo, hi)) = set.x_set.bounding_box() {
        println!("bounding box lo   {:?}", lo.as_slice().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
        println!("bounding box hi   {:?}", hi.as_slice().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
    println!("outputs in {}", dir.display());
    Ok(EXIT_OK)
}

fn cmd_solve(a: &SolveArgs) -> Result<i32, CliError> {
    let src = fs::read_to_string(&a.qp).map_err(|e| CliError::config(format!("{}: {e}", a.qp.display())))?;
    let qp = parse_qp(&src).map_err(|e| CliError::config(format!("{}: {e}", a.qp.display())))?;
    let settings = a.settings.apply(SolverSettings::default());
    let mut solver = Solver::setup(a.solver, &qp, &settings).map_err(CliError::solver)?;
    let info = solver.solve(None);
    let kkt = check_kkt(&qp, solver.x(), solver.duals());
    println!("solver        {}", a.solver.as_str());
    println!("variables     {}", qp.n());
    println!("constraints   {}", qp.m());
    println!("status        {}", info.status.as_str());
    println!("iterations    {}", info.iterations);
    println!("objective     {:.12e}", info.objective);
    println!("setup time    {:.3e} s", info.setup_seconds);
    println!("solve time    {:.3e} s", info.solve_seconds);
    println!("stationarity  {:.3e}", kkt.stationarity);
    println!("primal viol.  {:.3e}", kkt.primal);
    println!("complement.   {:.3e}", kkt.complementarity);
    if a.print_solution {
        for (i, v) in solver.x().iter().enumerate() {
            println!("x[{i}] = {v:.12e}");
        }
    }
    Ok(if info.status == Status::Solved { EXIT_OK } else { EXIT_SOLVER })
}

fn cmd_export(a: &ExportArgs) -> Result<i32, CliError> {
    let mut config = load(&a.config)?;
    if let Some(b) = &a.block {
        config.condensing_block = b.clone();
    }
    let mut scenario = validate(&config)?;
    let mpc = scenario.mpc_config_mut(a.mode);
    if let Some(n) = a.horizon {
        if n == 0 {
            return Err(CliError::config("--horizon must be positive"));
        }
        mpc.n_steps = n;
    }
    mpc.condensing_block = config.condensing_block.resolve(mpc.n_steps);
    let mpc = mpc.clone();
    let block = mpc.condensing_block;
    let mut c = MpcController::new(mpc, scenario.params.clone(), scenario.solver, scenario.settings).map_err(CliError::config)?;
    let (staged, _, _) = c.build(&scenario.initial_state(), &scenario.reference, 0.0).map_err(CliError::solver)?;
    let h = staged.condense(block).map_err(CliError::config)?;
    fs::write(&a.out, crate::qp::text::write_qp(&h.qp)).map_err(|e| io_err(format!("{}: {e}", a.out.display())))?;
    println!("wrote {} ({} variables, {} constraints)", a.out.display(), h.qp.n(), h.qp.m());
    Ok(EXIT_OK)
}
