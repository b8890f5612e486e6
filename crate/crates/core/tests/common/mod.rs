use attitude_mpc::qp::{QpProblem, INFINITY};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random strictly convex QP whose constraints contain a known point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=30);
    let m = rng.random_range(0..=60);
    let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let a = DMatrix::from_fn(m, n, |_, _| if rng.random_bool(0.6) { rng.random_range(-1.0..1.0) } else { 0.0 });
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ax = &a * nalgebra::DVector::from_column_slice(&x0);
    let mut lower = vec![0.0; m];
    let mut upper = vec![0.0; m];
    for i in 0..m {
        match rng.random_range(0..5) {
            0 => {
                lower[i] = ax[i];
                upper[i] = ax[i];
            }
            1 => {
                lower[i] = -INFINITY;
                upper[i] = ax[i] + rng.random_range(0.0..0.5);
            }
            2 => {
                lower[i] = ax[i] - rng.random_range(0.0..0.5);
                upper[i] = INFINITY;
            }
            _ => {
                lower[i] = ax[i] - rng.random_range(0.0..0.5);
                upper[i] = ax[i] + rng.random_range(0.0..0.5);
            }
        }
    }
    QpProblem::from_dense(&h, &g, &a, &lower, &upper).unwrap()
}
