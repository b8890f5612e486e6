use attitude_mpc::dynamics::{momentum_body, BodyState, SpacecraftParams};
use attitude_mpc::error_system::{
    compute_error, reconstruct_omega, stabilizer_torque_from_error, state_from_error, ErrorState, Gains,
    LoopMode,
};
use attitude_mpc::mpc::{terminal_ingredients, MpcConfig, MpcController, StagedProblem};
use attitude_mpc::qp::{solve, SolverKind, SolverSettings, Status};
use attitude_mpc::reference::{sample_grid, ConstantRate, PiecewisePolynomialRate, Reference};
use attitude_mpc::so3::{exp_so3, RotationMatrix, RotationVector, Vec3};
use nalgebra::Vector6;

fn params() -> SpacecraftParams {
    SpacecraftParams::reference_scenario()
}

fn gains() -> Gains {
    Gains::critically_damped(1.2)
}

fn scenario_reference() -> ConstantRate {
    ConstantRate::new(RotationMatrix::identity(), Vec3::new(0.4, 0.3, 0.0))
}

fn tight() -> SolverSettings {
    SolverSettings::tight(1e-10)
}

/// Staged problem from error `x0` at t = 0 with terminal ingredients taken
/// at the end of the horizon.
fn staged(mode: LoopMode, n: usize, x0: &ErrorState, reference: &dyn Reference) -> StagedProblem {
    let p = params();
    let mut config = MpcConfig::for_mode(mode, &p, gains());
    config.n_steps = n;
    let s0 = reference.sample(0.0);
    let l_inertial = s0.r_d.matrix() * p.inertia() * s0.omega_d;
    let state = state_from_error(x0, &s0, l_inertial);
    let mut c = MpcController::new(config, p, SolverKind::ActiveSet, tight()).unwrap();
    c.build(&state, reference, 0.0).unwrap().0
}

fn small_error() -> ErrorState {
    ErrorState {
        dphi: Vec3::new(2e-3, -1e-3, 1.5e-3),
        domega: Vec3::new(-1e-3, 5e-4, 1e-3),
    }
}

fn assert_no_active_rows(sp: &StagedProblem, z: &[f64]) {
    let h = sp.sparse_qp();
    let mut az = vec![0.0; h.qp.m()];
    h.qp.a.gemv(1.0, z, 0.0, &mut az);
    for i in 0..h.qp.m() {
        if h.qp.lower[i] == h.qp.upper[i] {
            continue;
        }
        let gap = (az[i] - h.qp.lower[i]).min(h.qp.upper[i] - az[i]);
        assert!(gap > 1e-6, "row {i} active (gap {gap:e})");
    }
}

#[test]
fn equilibrium_single_step() {
    let p = params();
    let reference = ConstantRate::new(RotationMatrix::identity(), Vec3::zeros());
    let mut config = MpcConfig::single_loop(&p, gains());
    config.n_steps = 1;
    let state = BodyState {
        r: RotationMatrix::identity(),
        omega: Vec3::zeros(),
        l_inertial: Vec3::zeros(),
    };
    let mut c = MpcController::new(config, p, SolverKind::ActiveSet, tight()).unwrap();
    let (sp, _, _) = c.build(&state, &reference, 0.0).unwrap();
    let h = sp.sparse_qp();
    let sol = solve(SolverKind::ActiveSet, &h.qp, &tight()).unwrap();
    assert_eq!(sol.status, Status::Solved);
    assert!(h.recovery.first_input(&sol.x).norm() < 1e-12);
    assert!(h.objective(&sol.x).abs() < 1e-12);
}

#[test]
fn row_counts() {
    let x0 = ErrorState::zero();
    for mode in [LoopMode::Single, LoopMode::Dual] {
        let n = 7;
        let sp = staged(mode, n, &x0, &scenario_reference());
        let t = sp.terminal_h.nrows();
        let sparse = sp.sparse_qp();
        assert_eq!(sparse.qp.m(), 6 * n + 3 * n + 3 * n + t);
        assert_eq!(sparse.qp.equality_count(), 6 * n);
        assert_eq!(sparse.qp.n(), 9 * n);
        let dense = sp.condense(n).unwrap();
        assert_eq!(dense.qp.equality_count(), 0);
        assert_eq!(dense.qp.n(), 3 * n);
        assert_eq!(dense.qp.m(), 6 * n + t);
    }
}

#[test]
fn block_one_matches_repeated_build() {
    let sp = staged(LoopMode::Single, 5, &small_error(), &scenario_reference());
    assert_eq!(sp.condense(1).unwrap(), sp.sparse_qp());
    assert!(sp.condense(0).is_err());
    assert!(sp.condense(6).is_err());
}

/// Backward recursion for `x+ = A x + B u + c` with cost
/// `sum x'Qx + (u - r)'R(u - r) + x_N' P x_N`; returns the optimal `u_0`.
fn riccati_first_input(sp: &StagedProblem) -> Vec3 {
    let mut pk = sp.p;
    let mut lin = Vector6::zeros();
    let mut first = Vec3::zeros();
    for (k, st) in sp.stages.iter().enumerate().rev() {
        let s = sp.r + st.b.transpose() * pk * st.b;
        let s_inv = s.try_inverse().unwrap();
        let gain = s_inv * st.b.transpose() * pk * st.a;
        let ff = s_inv * (sp.r * st.u_ref - st.b.transpose() * (pk * st.c + lin));
        if k == 0 {
            first = -gain * sp.x0 + ff;
        }
        let a_cl = st.a - st.b * gain;
        let d = st.b * ff + st.c;
        let new_lin = -gain.transpose() * sp.r * (ff - st.u_ref) + a_cl.transpose() * (pk * d + lin);
        pk = sp.q + st.a.transpose() * pk * a_cl;
        pk = 0.5 * (pk + pk.transpose());
        lin = new_lin;
    }
    first
}

#[test]
fn single_loop_matches_riccati_recursion() {
    let reference = PiecewisePolynomialRate::new(
        RotationMatrix::identity(),
        vec![
            (0.0, [vec![0.1, 0.05], vec![0.2, 0.0, -0.02], vec![-0.1, 0.02]]),
            (0.6, [vec![0.13, -0.04], vec![0.2, -0.024], vec![-0.088, 0.0, 0.01]]),
        ],
        2.0,
        0.01,
    );
    let sp = staged(LoopMode::Single, 11, &small_error(), &reference);
    let want = riccati_first_input(&sp);
    for (kind, block) in [(SolverKind::ActiveSet, 11), (SolverKind::Admm, 1)] {
        let h = sp.condense(block).unwrap();
        let sol = solve(kind, &h.qp, &tight()).unwrap();
        assert_eq!(sol.status, Status::Solved);
        assert_no_active_rows(&sp, &sp.sparse_qp().recovery.pack(&h.recovery.predicted_states(&sol.x), &h.recovery.inputs(&sol.x)));
        let got = h.recovery.first_input(&sol.x);
        assert!((got - want).abs().max() < 1e-6, "{kind:?}: {got} vs {want}");
    }
}

#[test]
fn dual_loop_matches_lqr_gain() {
    let x0 = small_error();
    let sp = staged(LoopMode::Dual, 11, &x0, &scenario_reference());
    let p = params();
    let config = MpcConfig::dual_loop(gains());
    let s = scenario_reference().sample(1.1);
    let term = terminal_ingredients(&config, &p, &s, &(p.inertia() * s.omega_d)).unwrap();
    assert_eq!(term.set.p, sp.p);
    let h = sp.condense(11).unwrap();
    let sol = solve(SolverKind::ActiveSet, &h.qp, &tight()).unwrap();
    let got = h.recovery.first_input(&sol.x);
    let want = term.set.k_gain * x0.to_vector();
    assert!((got - want).abs().max() < 1e-6, "{got} vs {want}");
}

#[test]
fn dual_loop_model_is_constant() {
    let sp = staged(LoopMode::Dual, 6, &small_error(), &scenario_reference());
    for st in &sp.stages[1..] {
        assert_eq!(st.a, sp.stages[0].a);
        assert_eq!(st.b, sp.stages[0].b);
    }
}

#[test]
fn condensing_levels_agree() {
    let x0 = ErrorState {
        dphi: Vec3::new(0.1, -0.08, 0.05),
        domega: Vec3::new(0.02, 0.01, -0.03),
    };
    for mode in [LoopMode::Single, LoopMode::Dual] {
        let sp = staged(mode, 10, &x0, &scenario_reference());
        let base = {
            let h = sp.sparse_qp();
            let sol = solve(SolverKind::ActiveSet, &h.qp, &tight()).unwrap();
            assert_eq!(sol.status, Status::Solved);
            (h.recovery.inputs(&sol.x), h.objective(&sol.x))
        };
        for block in [2, 5, 10] {
            let h = sp.condense(block).unwrap();
            let sol = solve(SolverKind::ActiveSet, &h.qp, &tight()).unwrap();
            assert_eq!(sol.status, Status::Solved, "{mode:?} M={block}");
            for (a, b) in h.recovery.inputs(&sol.x).iter().zip(&base.0) {
                assert!((a - b).abs().max() < 1e-6, "{mode:?} M={block}");
            }
            assert!((h.objective(&sol.x) - base.1).abs() < 1e-6 * (1.0 + base.1.abs()));
        }
    }
}

#[test]
fn hessians_are_psd() {
    let x0 = ErrorState {
        dphi: Vec3::new(0.1, -0.08, 0.05),
        domega: Vec3::new(0.02, 0.01, -0.03),
    };
    for mode in [LoopMode::Single, LoopMode::Dual] {
        let sp = staged(mode, 8, &x0, &scenario_reference());
        for block in [1, 3, 8] {
            let h = sp.condense(block).unwrap().qp.hessian.symmetric_to_dense();
            let min = h.symmetric_eigenvalues().min();
            assert!(min >= -1e-10, "{mode:?} M={block}: {min:e}");
        }
    }
}

#[test]
fn constraint_maps_reproduce_rates_and_torques() {
    let reference = scenario_reference();
    let x0 = ErrorState {
        dphi: Vec3::new(0.2, -0.1, 0.05),
        domega: Vec3::new(-0.05, 0.02, 0.03),
    };
    let p = params();
    let n = 11;
    let s0 = reference.sample(0.0);
    let l_inertial = s0.r_d.matrix() * p.inertia() * s0.omega_d;
    for mode in [LoopMode::Single, LoopMode::Dual] {
        let sp = staged(mode, n, &x0, &reference);
        let h = sp.condense(n).unwrap();
        let sol = solve(SolverKind::ActiveSet, &h.qp, &tight()).unwrap();
        assert_eq!(sol.status, Status::Solved);
        let xs = h.recovery.predicted_states(&sol.x);
        let us = h.recovery.inputs(&sol.x);
        let grid = sample_grid(&reference, 0.0, 0.1, n);
        let l_body = momentum_body(&state_from_error(&x0, &s0, l_inertial));
        for k in 0..n {
            let e = ErrorState::from_vector(&xs[k]);
            let sample = &grid.samples[k];
            // Predicted body state with the momentum frozen in the body frame.
            let body = state_from_error(&e, sample, Vec3::zeros());
            let body = BodyState {
                l_inertial: body.r.matrix() * l_body,
                ..body
            };
            let tau = match mode {
                LoopMode::Single => us[k],
                LoopMode::Dual => stabilizer_torque_from_error(&p, &body, sample, &gains(), &us[k], &e),
            };
            let mapped = sp.stages[k].torque.eval(&xs[k], &us[k]);
            assert!((tau - mapped).abs().max() < 1e-8, "{mode:?} k={k}");
            assert!(tau.abs().max() <= 40.0 + 1e-7);
            let e_next = ErrorState::from_vector(&xs[k + 1]);
            let omega = reconstruct_omega(&e_next.domega, &grid.samples[k + 1]);
            let rows = sp.rates[k].rot * e_next.domega;
            assert!((omega - grid.samples[k + 1].omega_d - rows).abs().max() < 1e-12);
            assert!(omega.abs().max() <= 0.5 + 1e-7, "{mode:?} k={k}: {omega}");
        }
    }
}

#[test]
fn dual_prediction_is_lti_rollout() {
    let x0 = ErrorState {
        dphi: Vec3::new(0.15, 0.1, -0.05),
        domega: Vec3::new(0.0, -0.02, 0.01),
    };
    let sp = staged(LoopMode::Dual, 11, &x0, &scenario_reference());
    for block in [1, 4, 11] {
        let h = sp.condense(block).unwrap();
        let sol = solve(SolverKind::ActiveSet, &h.qp, &tight()).unwrap();
        let xs = h.recovery.predicted_states(&sol.x);
        let us = h.recovery.inputs(&sol.x);
        let mut x = sp.x0;
        for k in 0..11 {
            assert!((x - xs[k]).abs().max() < 1e-10, "M={block} k={k}");
            x = sp.stages[k].a * x + sp.stages[k].b * us[k];
        }
        assert!((x - xs[11]).abs().max() < 1e-10);
    }
}

fn scenario_state(scale: f64) -> BodyState {
    let p = params();
    let s0 = scenario_reference().sample(0.0);
    let r = exp_so3(&RotationVector(Vec3::new(0.8, -0.5, 0.3) * scale)).compose(&s0.r_d);
    BodyState {
        r,
        omega: Vec3::zeros(),
        l_inertial: r.matrix() * p.inertia() * s0.omega_d,
    }
}

#[test]
fn zero_error_applies_gyroscopic_torque() {
    let p = params();
    let reference = scenario_reference();
    let s0 = reference.sample(0.0);
    let l_inertial = p.inertia() * s0.omega_d;
    let state = BodyState {
        r: s0.r_d,
        omega: s0.omega_d,
        l_inertial,
    };
    for mode in [LoopMode::Single, LoopMode::Dual] {
        for kind in [SolverKind::ActiveSet, SolverKind::Admm] {
            let config = MpcConfig::for_mode(mode, &p, gains());
            let mut c = MpcController::new(config, p.clone(), kind, tight()).unwrap();
            let sol = c.step(&state, &reference, 0.0).unwrap();
            assert!(!sol.fallback);
            let want = s0.omega_d.cross(&momentum_body(&state));
            assert!((sol.applied_torque - want).abs().max() < 1e-9, "{mode:?} {kind:?}: {}", sol.applied_torque);
        }
    }
}

#[test]
fn scenario_first_step_and_warm_start() {
    let p = params();
    let reference = scenario_reference();
    for mode in [LoopMode::Single, LoopMode::Dual] {
        for kind in [SolverKind::ActiveSet, SolverKind::Admm] {
            let mut config = MpcConfig::for_mode(mode, &p, gains());
            config.condensing_block = config.n_steps;
            let mut c = MpcController::new(config, p.clone(), kind, SolverSettings::default()).unwrap();
            let mut state = scenario_state(0.3);
            let first = c.step(&state, &reference, 0.0).unwrap();
            assert!(!first.fallback);
            assert!(first.applied_torque.abs().max() <= 40.0 + 1e-9);
            state = attitude_mpc::dynamics::step_plant(&p, &state, &first.applied_torque, 0.1);
            let second = c.step(&state, &reference, 0.1).unwrap();
            assert!(!second.fallback);
            assert!(
                second.stats.iterations <= first.stats.iterations,
                "{mode:?} {kind:?}: {} > {}",
                second.stats.iterations,
                first.stats.iterations
            );
        }
    }
}

#[test]
fn error_passed_to_builder_uses_hint() {
    let reference = scenario_reference();
    let s0 = reference.sample(0.0);
    let state = scenario_state(0.3);
    let e = compute_error(&state, &s0, &RotationVector::zero()).unwrap();
    let sp = staged(LoopMode::Dual, 3, &e, &reference);
    assert!((sp.x0 - e.to_vector()).abs().max() < 1e-12);
}
