use attitude_mpc::dynamics::{momentum_body, step_plant, BodyState, SpacecraftParams};
use attitude_mpc::error_system::{discretize_lpv, discretize_lti, lpv_continuous, lti_continuous, Gains};
use attitude_mpc::reference::ReferenceSample;
use attitude_mpc::so3::{exp_so3, log_so3, RotationMatrix, RotationVector, Vec3};
use nalgebra::Vector6;
use proptest::prelude::*;

fn params() -> SpacecraftParams {
    SpacecraftParams::reference_scenario()
}

fn torque(t: f64) -> Vec3 {
    Vec3::new(5.0 * (0.7 * t).sin(), -3.0 * (1.3 * t).cos(), 2.0)
}

/// Integrates with `torque` held piecewise constant over 0.1 s windows.
fn run(dt: f64) -> BodyState {
    let p = params();
    let mut s = BodyState {
        r: RotationMatrix::identity(),
        omega: Vec3::new(0.1, -0.2, 0.15),
        l_inertial: Vec3::new(3.0, 1.0, -2.0),
    };
    let per_window = (0.1 / dt).round() as usize;
    for w in 0..20 {
        let tau = torque(w as f64 * 0.1);
        for _ in 0..per_window {
            s = step_plant(&p, &s, &tau, dt);
        }
    }
    s
}

fn distance(a: &BodyState, b: &BodyState) -> f64 {
    let dr = log_so3(&a.r.compose(&b.r.transpose()), &RotationVector::zero()).unwrap().0.norm();
    dr.max((a.omega - b.omega).norm())
}

#[test]
fn rk4_converges_at_fourth_order() {
    let truth = run(1e-3);
    let errs: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&dt| distance(&run(dt), &truth)).collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((3.5..4.6).contains(&order), "observed order {order} from {errs:?}");
    }
}

#[test]
fn free_body_conserves_energy_and_wheel_momentum() {
    let p = params();
    let omega = Vec3::new(0.35, -0.25, 0.3);
    let mut s = BodyState {
        r: exp_so3(&RotationVector::new(0.2, 0.1, -0.4)),
        omega,
        l_inertial: Vec3::zeros(),
    };
    s.l_inertial = s.r.matrix() * p.inertia() * omega;
    let energy = |s: &BodyState| 0.5 * s.omega.dot(&(p.inertia() * s.omega));
    let e0 = energy(&s);
    for _ in 0..2000 {
        s = step_plant(&p, &s, &Vec3::zeros(), 0.05);
    }
    let drift = (energy(&s) - e0).abs() / e0;
    assert!(drift < 1e-8, "relative energy drift {drift:e}");
    let wheel = (momentum_body(&s) - p.inertia() * s.omega).norm();
    assert!(wheel < 1e-8 * s.l_inertial.norm(), "wheel momentum {wheel:e}");
}

fn rk4_affine(a: &nalgebra::Matrix6<f64>, b: &nalgebra::Matrix6x3<f64>, c: &Vector6<f64>, x: &Vector6<f64>, u: &Vec3, dt: f64) -> Vector6<f64> {
    let f = |x: &Vector6<f64>| a * x + b * u + c;
    let n = 1000;
    let h = dt / n as f64;
    let mut x = *x;
    for _ in 0..n {
        let k1 = f(&x);
        let k2 = f(&(x + 0.5 * h * k1));
        let k3 = f(&(x + 0.5 * h * k2));
        let k4 = f(&(x + h * k3));
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zoh_matches_ode_integration(
        rd in [-2.0..2.0f64, -2.0..2.0, -2.0..2.0],
        wd in [-0.5..0.5f64, -0.5..0.5, -0.5..0.5],
        x in prop::array::uniform6(-0.5..0.5f64),
        u in [-20.0..20.0f64, -20.0..20.0, -20.0..20.0],
    ) {
        let p = params();
        let sample = ReferenceSample {
            t: 0.0,
            r_d: exp_so3(&RotationVector::new(rd[0], rd[1], rd[2])),
            omega_d: Vec3::from(wd),
            domega_d: Vec3::new(0.01, -0.02, 0.0),
        };
        let l_body = p.inertia() * sample.omega_d;
        let cont = lpv_continuous(&p, &sample, &l_body);
        let d = discretize_lpv(&cont, 0.1);
        let x = Vector6::from(x);
        let u = Vec3::from(u);
        let oracle = rk4_affine(&cont.a, &cont.b, &cont.c, &x, &u, 0.1);
        prop_assert!((d.a * x + d.b * u + d.c - oracle).abs().max() < 1e-9);

        let g = Gains::critically_damped(1.2);
        let (a, b) = lti_continuous(&g);
        let m = discretize_lti(&g, 0.1);
        let oracle = rk4_affine(&a, &b, &Vector6::zeros(), &x, &u, 0.1);
        prop_assert!((m.a * x + m.b * u - oracle).abs().max() < 1e-9);
    }
}
