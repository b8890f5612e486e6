mod common;

use attitude_mpc::qp::verify::check_kkt;
use attitude_mpc::qp::{QpSolver, Solver, SolverKind, SolverSettings, Status};
use common::random_qp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn solvers_agree_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let settings = SolverSettings::tight(1e-8);
    let mut worst: f64 = 0.0;
    for k in 0..500 {
        let qp = random_qp(&mut rng);
        let mut admm = Solver::setup(SolverKind::Admm, &qp, &settings).unwrap();
        let mut asm = Solver::setup(SolverKind::ActiveSet, &qp, &settings).unwrap();
        let ia = admm.solve(None);
        let ib = asm.solve(None);
        assert_eq!(ia.status, Status::Solved, "admm instance {k}");
        assert_eq!(ib.status, Status::Solved, "active-set instance {k}");
        let rel = (ia.objective - ib.objective).abs() / ib.objective.abs().max(1.0);
        worst = worst.max(rel);
        assert!(rel < 1e-5, "instance {k}: {} vs {}", ia.objective, ib.objective);
        let kkt = check_kkt(&qp, admm.x(), admm.duals());
        assert!(kkt.certifies(1e-5, 1e-5, 1e-5), "admm instance {k}: {kkt:?}");
        let kkt = check_kkt(&qp, asm.x(), asm.duals());
        assert!(kkt.certifies(1e-5, 1e-6, 1e-6), "instance {k}: {kkt:?}");
    }
    eprintln!("worst relative objective gap {worst:e}");
}
