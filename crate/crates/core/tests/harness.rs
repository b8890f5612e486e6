use attitude_mpc::dynamics::momentum_body;
use attitude_mpc::error_system::LoopMode;
use attitude_mpc::harness::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_USAGE};
use attitude_mpc::harness::config::{ConfigError, ScenarioConfig};
use attitude_mpc::harness::simulate::{simulate, ControlMode, RunRecord, RUN_COLUMNS, TIMING_COLUMNS};
use attitude_mpc::qp::text::{parse_qp, write_qp};
use attitude_mpc::qp::{solve, QpProblem, SolverKind, SolverSettings, Status};
use nalgebra::{DMatrix, DVector};

fn short(duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        duration_s: duration,
        ..ScenarioConfig::default()
    }
}

fn csv_without_timing(run: &RunRecord) -> Vec<Vec<String>> {
    let mut buf = Vec::new();
    run.write_csv(&mut buf).unwrap();
    let skip: Vec<usize> = TIMING_COLUMNS.iter().map(|c| RUN_COLUMNS.iter().position(|r| r == c).unwrap()).collect();
    csv::Reader::from_reader(buf.as_slice())
        .records()
        .map(|r| {
            r.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| !skip.contains(i))
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn default_config_roundtrips_through_toml() {
    let c = ScenarioConfig::default();
    assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert_eq!(ScenarioConfig::from_toml("").unwrap(), c);
}

#[test]
fn unknown_keys_are_rejected_with_location() {
    let err = ScenarioConfig::from_toml("[spacecraft]\nmass_kg = 3.0\n").unwrap_err();
    match &err {
        ConfigError::Parse(_) => {}
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("mass_kg") && msg.contains("line 2"), "{msg}");
}

#[test]
fn duration_must_be_a_multiple_of_the_step() {
    let err = short(1.05).validate().unwrap_err();
    assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "duration_s"), "{err}");
    assert_eq!(short(2.5).validate().unwrap().steps, 25);
}

#[test]
fn simulation_is_reproducible_and_has_one_row_per_step() {
    let mut c = short(3.0);
    c.initial.random_attitude_error_max_rad = Some(0.2);
    let s = c.validate().unwrap();
    for mode in [ControlMode::Mpc(LoopMode::Dual), ControlMode::Mpc(LoopMode::Single), ControlMode::Stabilizer] {
        let a = simulate(&s, mode, SolverKind::ActiveSet, |_, _| {}).unwrap();
        let b = simulate(&s, mode, SolverKind::ActiveSet, |_, _| {}).unwrap();
        assert_eq!(a.rows.len(), 31);
        assert_eq!(csv_without_timing(&a), csv_without_timing(&b), "{}", mode.as_str());
    }
}

#[test]
fn zero_error_applies_gyroscopic_torque() {
    let mut c = short(3.0);
    c.initial.attitude_error_rotvec_rad = [0.0; 3];
    c.initial.body_rate_rad_s = [0.4, 0.3, 0.0];
    let s = c.validate().unwrap();
    let gyro = |run: &RunRecord, k: usize| {
        let state = &run.states[k];
        (run.rows[k].tau - state.omega.cross(&momentum_body(state))).abs().max()
    };
    // Continuous feedback keeps the plant exactly on the reference.
    let run = simulate(&s, ControlMode::Stabilizer, SolverKind::ActiveSet, |_, _| {}).unwrap();
    for k in 0..run.rows.len() {
        assert!(gyro(&run, k) < 1e-9, "stabilizer t={}", run.rows[k].t);
    }
    // A held torque cannot follow the body-frame momentum as it rotates
    // within a step, so later rows only stay close.
    for mode in [LoopMode::Single, LoopMode::Dual] {
        for solver in [SolverKind::ActiveSet, SolverKind::Admm] {
            let run = simulate(&s, ControlMode::Mpc(mode), solver, |_, _| {}).unwrap();
            assert!(gyro(&run, 0) < 1e-9, "{mode:?} {solver:?}");
            for (k, row) in run.rows.iter().enumerate() {
                assert!(gyro(&run, k) < 0.1 && row.error.dphi.norm() < 1e-3, "{mode:?} {solver:?} t={}", row.t);
            }
        }
    }
}

#[test]
fn stabilizer_lyapunov_function_is_nonincreasing() {
    let mut c = short(25.0);
    c.initial.attitude_error_rotvec_rad = [1.5, -0.9, 0.6];
    c.initial.body_rate_rad_s = [0.1, -0.2, 0.3];
    let s = c.validate().unwrap();
    let run = simulate(&s, ControlMode::Stabilizer, SolverKind::ActiveSet, |_, _| {}).unwrap();
    for w in run.rows.windows(2) {
        assert!(w[1].lyapunov <= w[0].lyapunov + 1e-9, "t={}", w[1].t);
    }
    assert!(run.rows.last().unwrap().lyapunov < 1e-3 * run.rows[0].lyapunov);
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("attmpc").chain(args.iter().copied()))
}

#[test]
fn cli_reports_usage_errors() {
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["solve"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn cli_rejects_malformed_qp_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.qp");
    std::fs::write(&path, "2 x 1 0\n").unwrap();
    assert_eq!(cli(&["solve", "--qp", path.to_str().unwrap()]), EXIT_CONFIG);
    assert!(parse_qp("2 x 1 0\n").is_err());
}

#[test]
fn cli_solves_unconstrained_qp_to_its_minimum() {
    let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
    let g = [1.0, -2.0];
    let qp = QpProblem::from_dense(&h, &g, &DMatrix::zeros(0, 2), &[], &[]).unwrap();
    let text = write_qp(&qp);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("free.qp");
    std::fs::write(&path, &text).unwrap();
    let x_star = -h.clone().lu().solve(&DVector::from_column_slice(&g)).unwrap();
    for solver in ["active-set", "admm"] {
        assert_eq!(cli(&["solve", "--qp", path.to_str().unwrap(), "--solver", solver]), EXIT_OK);
        let sol = solve(solver.parse().unwrap(), &parse_qp(&text).unwrap(), &SolverSettings::tight(1e-10)).unwrap();
        assert_eq!(sol.status, Status::Solved);
        assert!((DVector::from_vec(sol.x) - &x_star).norm() < 1e-8, "{solver}");
    }
}

#[test]
fn exported_horizon_qp_gives_same_objective_for_both_solvers() {
    let dir = tempfile::tempdir().unwrap();
    // Two steps only reach the terminal set from near the reference.
    let mut config = ScenarioConfig::default();
    config.initial.attitude_error_rotvec_rad = [0.05, -0.03, 0.02];
    config.initial.body_rate_rad_s = [0.4, 0.3, 0.0];
    let cfg = dir.path().join("scenario.toml");
    std::fs::write(&cfg, config.to_toml()).unwrap();
    let c = cfg.to_str().unwrap();
    for mode in ["single", "dual"] {
        let path = dir.path().join(format!("{mode}.qp"));
        let p = path.to_str().unwrap();
        assert_eq!(cli(&["export-qp", "--config", c, "--mode", mode, "--horizon", "2", "--block", "1", "--out", p]), EXIT_OK);
        for solver in ["active-set", "admm"] {
            assert_eq!(cli(&["solve", "--qp", p, "--solver", solver, "--eps-abs", "1e-9", "--eps-rel", "1e-9"]), EXIT_OK);
        }
        let qp = parse_qp(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let a = solve(SolverKind::ActiveSet, &qp, &SolverSettings::tight(1e-9)).unwrap();
        let b = solve(SolverKind::Admm, &qp, &SolverSettings::tight(1e-9)).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-6 * a.objective.abs().max(1.0), "{mode}: {} vs {}", a.objective, b.objective);
    }
}

#[test]
fn cli_simulate_and_terminal_set_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    std::fs::write(&cfg, short(2.0).to_toml()).unwrap();
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(cli(&["simulate", "--config", c, "--mode", "single", "--out", o]), EXIT_OK);
    assert!(out.join("run_single.csv").exists());
    assert!(out.join("single_dphi_norm.svg").exists());
    assert_eq!(cli(&["terminal-set", "--config", c, "--mode", "dual", "--out", o]), EXIT_OK);
    assert!(out.join("terminal_dual_X.csv").exists());
    std::fs::write(&cfg, "dt_s = -1.0\n").unwrap();
    assert_eq!(cli(&["simulate", "--config", c]), EXIT_CONFIG);
}

#[test]
fn cli_benchmark_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    std::fs::write(&cfg, short(1.0).to_toml()).unwrap();
    let out = dir.path().join("bench");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let code = cli(&["benchmark", "--config", c, "--horizons", "3,6", "--blocks", "1,full", "--modes", "dual", "--reps", "1", "--out", o]);
    assert_eq!(code, EXIT_OK);
    let summary = std::fs::read_to_string(out.join("benchmark_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2 * 2);
}

#[test]
fn shipped_configs_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = ScenarioConfig::load(&dir.join("scenario.toml")).unwrap();
    assert_eq!(default, ScenarioConfig::default());
    let slew = ScenarioConfig::load(&dir.join("slew.toml")).unwrap().validate().unwrap();
    assert_eq!(slew.steps, 300);
}

#[test]
fn mode_traces_agree_above_the_sampling_floor() {
    // Both loops settle onto an O(dt) offset of a few mrad caused by the held
    // torque; the comparison is made where either error is above 1e-2 rad.
    let s = ScenarioConfig::default().validate().unwrap();
    let single = simulate(&s, ControlMode::Mpc(LoopMode::Single), s.solver, |_, _| {}).unwrap();
    let dual = simulate(&s, ControlMode::Mpc(LoopMode::Dual), s.solver, |_, _| {}).unwrap();
    let mut compared = 0;
    for (a, b) in single.rows.iter().zip(&dual.rows).filter(|(a, _)| a.t >= 5.0) {
        let (x, y) = (a.error.dphi.norm(), b.error.dphi.norm());
        if x.max(y) < 1e-2 {
            continue;
        }
        compared += 1;
        assert!((0.5..=2.0).contains(&(x / y)), "t={}: {x:e} vs {y:e}", a.t);
    }
    assert!(compared >= 10);
}
