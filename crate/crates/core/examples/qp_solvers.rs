//! Both QP solvers on a small box-constrained problem, plus the text format.

use attitude_mpc::qp::text::{parse_qp, write_qp};
use attitude_mpc::qp::verify::check_kkt;
use attitude_mpc::qp::{QpProblem, QpSolver, Solver, SolverKind, SolverSettings, INFINITY};
use nalgebra::DMatrix;

fn main() {
    // min (x0 - 1)^2 + (x1 - 2)^2 + x0 x1  s.t.  x0 + x1 = 1,  0 <= x0 <= 0.8,  x1 <= 0.9
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let g = [-2.0, -4.0];
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let qp = QpProblem::from_dense(&h, &g, &a, &[1.0, 0.0, -INFINITY], &[1.0, 0.8, 0.9]).expect("valid QP");

    let text = write_qp(&qp);
    println!("{text}");
    let qp = parse_qp(&text).expect("roundtrip");

    for kind in [SolverKind::ActiveSet, SolverKind::Admm] {
        let mut solver = Solver::setup(kind, &qp, &SolverSettings::tight(1e-9)).expect("setup");
        let info = solver.solve(None);
        let kkt = check_kkt(&qp, solver.x(), solver.duals());
        println!(
            "{:10} {:8} iters {:4}  x = {:?}  f = {:.9}  kkt {:.1e}",
            kind.as_str(),
            info.status.as_str(),
            info.iterations,
            solver.x(),
            info.objective,
            kkt.max_violation()
        );
    }
}
