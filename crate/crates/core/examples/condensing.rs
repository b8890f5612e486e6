//! One horizon problem at several condensing levels.

use std::time::Instant;

use attitude_mpc::error_system::LoopMode;
use attitude_mpc::harness::config::ScenarioConfig;
use attitude_mpc::mpc::MpcController;
use attitude_mpc::qp::{QpSolver, Solver, SolverKind};

fn main() {
    let mut scenario = ScenarioConfig::default().validate().expect("valid scenario");
    let mode = LoopMode::Dual;
    scenario.mpc_config_mut(mode).n_steps = 20;
    let mut controller = MpcController::new(
        scenario.mpc_config(mode).clone(),
        scenario.params.clone(),
        SolverKind::ActiveSet,
        scenario.settings,
    )
    .expect("valid controller");
    let (staged, _, _) = controller
        .build(&scenario.initial_state(), &scenario.reference, 0.0)
        .expect("problem builds");
    println!("block  vars  rows   nnz(H)  nnz(A)  solver      iters  solve[s]   first input");
    for block in [1, 2, 4, 10, 20] {
        let hqp = staged.condense(block).expect("condenses");
        for kind in [SolverKind::ActiveSet, SolverKind::Admm] {
            let start = Instant::now();
            let mut solver = Solver::setup(kind, &hqp.qp, &scenario.settings).expect("setup");
            let info = solver.solve(None);
            let u = hqp.recovery.first_input(solver.x());
            println!(
                "{block:5} {:5} {:5} {:8} {:7}  {:10} {:6}  {:.2e}  [{:.5}, {:.5}, {:.5}]",
                hqp.qp.n(),
                hqp.qp.m(),
                hqp.qp.hessian.nnz(),
                hqp.qp.a.nnz(),
                kind.as_str(),
                info.iterations,
                start.elapsed().as_secs_f64(),
                u[0],
                u[1],
                u[2]
            );
        }
    }
}
