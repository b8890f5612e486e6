//! Attitude error in reverse order, `dR = R R_d^T` and
//! `dw = R_d (omega - omega_d)`, with its linear models.
//!
//! Because `dw` is rotated into the reference frame, the body rate is an
//! affine function of the error state, `omega = omega_d + R_d^T dw`, so box
//! limits on `omega` stay linear in the MPC decision variables.

use nalgebra::{DMatrix, DVector, Matrix3x6, Matrix6, Matrix6x3, SMatrix, Vector6};

use crate::dynamics::{momentum_body, BodyState, SpacecraftParams};
use crate::reference::ReferenceSample;
use crate::so3::{exp_so3, log_so3, skew, Mat3, RotationMatrix, RotationVector, So3Error, Vec3};

/// Which loop the MPC closes: directly on torque, or as an outer loop that
/// shapes the stabilizer with `dalpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoopMode {
    Single,
    Dual,
}

impl LoopMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopMode::Single => "single",
            LoopMode::Dual => "dual",
        }
    }
}

impl std::str::FromStr for LoopMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(LoopMode::Single),
            "dual" => Ok(LoopMode::Dual),
            _ => Err(format!("unknown mode '{s}', expected single or dual")),
        }
    }
}

/// Stacked MPC state `(dphi, dw)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorState {
    pub dphi: Vec3,
    pub domega: Vec3,
}

impl ErrorState {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        crate::dynamics::stack(&self.dphi, &self.domega)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            dphi: x.fixed_rows::<3>(0).into_owned(),
            domega: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    /// `k_c/2 |dphi|^2 + 1/2 |dw|^2`.
    pub fn lyapunov(&self, gains: &Gains) -> f64 {
        0.5 * gains.k_c * self.dphi.norm_squared() + 0.5 * self.domega.norm_squared()
    }
}

/// Stabilizer gains; `4 k_c = k_omega^2` places a double pole per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    pub k_c: f64,
    pub k_omega: f64,
}

impl Gains {
    pub fn new(k_c: f64, k_omega: f64) -> Self {
        assert!(k_c > 0.0 && k_omega > 0.0, "gains must be positive");
        Self { k_c, k_omega }
    }

    pub fn critically_damped(k_omega: f64) -> Self {
        Self::new(k_omega * k_omega / 4.0, k_omega)
    }
}

pub fn compute_error(
    state: &BodyState,
    reference: &ReferenceSample,
    hint: &RotationVector,
) -> Result<ErrorState, So3Error> {
    let dr = state.r.compose(&reference.r_d.transpose());
    let dphi = log_so3(&dr, hint)?;
    Ok(ErrorState {
        dphi: dphi.0,
        domega: reference.r_d.matrix() * (state.omega - reference.omega_d),
    })
}

/// Body rate implied by an error-frame rate deviation.
pub fn reconstruct_omega(domega: &Vec3, reference: &ReferenceSample) -> Vec3 {
    reference.omega_d + reference.r_d.matrix().transpose() * domega
}

/// Body attitude and rate that realize `error` against `reference`.
pub fn state_from_error(error: &ErrorState, reference: &ReferenceSample, l_inertial: Vec3) -> BodyState {
    BodyState {
        r: exp_so3(&RotationVector(error.dphi)).compose(&reference.r_d),
        omega: reconstruct_omega(&error.domega, reference),
        l_inertial,
    }
}

/// Stabilizing tracking torque plus the outer-loop acceleration `dalpha`
/// injected through `J R_d^T`.
///
/// Returns the torque together with the error it was computed from so that
/// callers can reuse `dphi` as the next branch hint.
pub fn stabilizer_torque(
    params: &SpacecraftParams,
    state: &BodyState,
    reference: &ReferenceSample,
    gains: &Gains,
    dalpha: &Vec3,
    hint: &RotationVector,
) -> Result<(Vec3, ErrorState), So3Error> {
    let e = compute_error(state, reference, hint)?;
    Ok((stabilizer_torque_from_error(params, state, reference, gains, dalpha, &e), e))
}

pub fn stabilizer_torque_from_error(
    params: &SpacecraftParams,
    state: &BodyState,
    reference: &ReferenceSample,
    gains: &Gains,
    dalpha: &Vec3,
    e: &ErrorState,
) -> Vec3 {
    let j = params.inertia();
    let w = state.omega;
    let l = momentum_body(state);
    let rdt = reference.r_d.matrix().transpose();
    w.cross(&l) + j * (reference.domega_d - reference.omega_d.cross(&w))
        - j * rdt * (gains.k_c * e.dphi + gains.k_omega * e.domega)
        + j * rdt * dalpha
}

/// Continuous affine model `xdot = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
    pub c: Vector6<f64>,
}

/// Discrete affine model `x+ = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLtvModel {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
    pub c: Vector6<f64>,
}

/// Discrete inner-loop model `x+ = A x + B dalpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
}

/// Torque that holds the zero error state: `omega_d x L + J domega_d`.
pub fn equilibrium_torque(params: &SpacecraftParams, reference: &ReferenceSample, l_body: &Vec3) -> Vec3 {
    reference.omega_d.cross(l_body) + params.inertia() * reference.domega_d
}

/// Error dynamics with the torque as input and `L` frozen at `l_body`.
///
/// The attitude row is the kinematics linearized at zero, `dphi' = dw`. The
/// rate row is exact: substituting `omega = omega_d + R_d^T dw` and the
/// momentum-exchange dynamics into `dw' = R_d (omega_d x omega + omega' -
/// domega_d)` gives
///
/// ```text
/// dw' = R_d (S(omega_d) + J^-1 S(L)) R_d^T dw + R_d J^-1 tau
///     + R_d (J^-1 S(L) omega_d - domega_d)
/// ```
pub fn lpv_continuous(params: &SpacecraftParams, reference: &ReferenceSample, l_body: &Vec3) -> ContinuousModel {
    let rd = reference.r_d.matrix();
    let jinv = params.inertia_inv();
    let sl = skew(l_body);
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    a.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(rd * (skew(&reference.omega_d) + jinv * sl) * rd.transpose()));
    let mut b = Matrix6x3::zeros();
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rd * jinv));
    let mut c = Vector6::zeros();
    c.fixed_rows_mut::<3>(3)
        .copy_from(&(rd * (jinv * sl * reference.omega_d - reference.domega_d)));
    ContinuousModel { a, b, c }
}

/// The nonlinear right-hand side that [`lpv_continuous`] linearizes.
pub fn error_rhs(
    params: &SpacecraftParams,
    reference: &ReferenceSample,
    l_body: &Vec3,
    x: &ErrorState,
    tau: &Vec3,
) -> Result<Vector6<f64>, So3Error> {
    let rd = reference.r_d.matrix();
    let w = reconstruct_omega(&x.domega, reference);
    let wdot = params.inertia_inv() * (tau - w.cross(l_body));
    let dw = rd * (reference.omega_d.cross(&w) + wdot - reference.domega_d);
    let dphi = crate::so3::bortz_rate(&RotationVector(x.dphi), &x.domega)?;
    Ok(crate::dynamics::stack(&dphi, &dw))
}

/// Inner loop closed by the stabilizer: a double integrator per axis with
/// feedback `-k_c dphi - k_omega dw` and input `dalpha`.
pub fn lti_continuous(gains: &Gains) -> (Matrix6<f64>, Matrix6x3<f64>) {
    let i3 = Mat3::identity();
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&i3);
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-gains.k_c * i3));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-gains.k_omega * i3));
    let mut b = Matrix6x3::zeros();
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&i3);
    (a, b)
}

/// Zero-order-hold discretization of `xdot = A x + B u + c` through the
/// exponential of the augmented matrix `[[A, B, c], [0, 0, 0]] dt`.
pub fn zoh_discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: Option<&DVector<f64>>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    assert!(dt > 0.0, "dt must be positive");
    let n = a.nrows();
    let m = b.ncols();
    let w = n + m + 1;
    let mut aug = DMatrix::zeros(w, w);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    if let Some(c) = c {
        aug.view_mut((0, n + m), (n, 1)).copy_from(c);
    }
    let e = (aug * dt).exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
        e.view((0, n + m), (n, 1)).column(0).into_owned(),
    )
}

fn zoh6(a: &Matrix6<f64>, b: &Matrix6x3<f64>, c: Option<&Vector6<f64>>, dt: f64) -> AffineLtvModel {
    let ad = DMatrix::from_column_slice(6, 6, a.as_slice());
    let bd = DMatrix::from_column_slice(6, 3, b.as_slice());
    let cd = c.map(|c| DVector::from_column_slice(c.as_slice()));
    let (a, b, c) = zoh_discretize(&ad, &bd, cd.as_ref(), dt);
    AffineLtvModel {
        a: Matrix6::from_column_slice(a.as_slice()),
        b: Matrix6x3::from_column_slice(b.as_slice()),
        c: Vector6::from_column_slice(c.as_slice()),
    }
}

/// Per-knot discrete model of the single-loop MPC.
pub fn discretize_lpv(model: &ContinuousModel, dt: f64) -> AffineLtvModel {
    zoh6(&model.a, &model.b, Some(&model.c), dt)
}

pub fn discretize_lti(gains: &Gains, dt: f64) -> LtiModel {
    let (a, b) = lti_continuous(gains);
    let m = zoh6(&a, &b, None, dt);
    LtiModel { a: m.a, b: m.b }
}

/// Affine torque map `tau = offset + gx x + gu u` for one knot, with `L`
/// frozen.
///
/// Single loop: `u` is the torque itself. Dual loop: `u = dalpha` and the
/// stabilizer is expanded with `omega = omega_d + R_d^T dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueMap {
    pub offset: Vec3,
    pub gx: Matrix3x6<f64>,
    pub gu: Mat3,
}

impl TorqueMap {
    pub fn single_loop() -> Self {
        Self {
            offset: Vec3::zeros(),
            gx: Matrix3x6::zeros(),
            gu: Mat3::identity(),
        }
    }

    pub fn dual_loop(params: &SpacecraftParams, reference: &ReferenceSample, l_body: &Vec3, gains: &Gains) -> Self {
        let j = params.inertia();
        let rdt = reference.r_d.matrix().transpose();
        let jrdt = j * rdt;
        // d tau / d omega of  omega x L - J (omega_d x omega)
        let dtau_domega = -skew(l_body) - j * skew(&reference.omega_d);
        let mut gx = Matrix3x6::zeros();
        gx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-gains.k_c * jrdt));
        gx.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(dtau_domega * rdt - gains.k_omega * jrdt));
        Self {
            offset: equilibrium_torque(params, reference, l_body),
            gx,
            gu: jrdt,
        }
    }

    pub fn eval(&self, x: &Vector6<f64>, u: &Vec3) -> Vec3 {
        self.offset + self.gx * x + self.gu * u
    }
}

/// Spectral radius of a square matrix.
pub fn spectral_radius<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    let d = DMatrix::from_column_slice(N, N, m.as_slice());
    spectral_radius_dyn(&d)
}

pub fn spectral_radius_dyn(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Rotation applied to a point, convenient for the reference-frame maps.
pub fn rotate(r: &RotationMatrix, v: &Vec3) -> Vec3 {
    r.apply(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{ConstantRate, Reference};

    fn sample() -> ReferenceSample {
        ReferenceSample {
            t: 0.0,
            r_d: exp_so3(&RotationVector::new(0.3, -0.7, 0.2)),
            omega_d: Vec3::new(0.4, 0.3, 0.0),
            domega_d: Vec3::new(0.01, -0.02, 0.03),
        }
    }

    fn state() -> BodyState {
        BodyState {
            r: exp_so3(&RotationVector::new(-0.2, 0.5, 0.9)),
            omega: Vec3::new(0.1, -0.2, 0.25),
            l_inertial: Vec3::new(20.0, -5.0, 12.0),
        }
    }

    #[test]
    fn zero_error_at_reference() {
        let r = sample();
        let s = BodyState {
            r: r.r_d,
            omega: r.omega_d,
            l_inertial: Vec3::zeros(),
        };
        let e = compute_error(&s, &r, &RotationVector::zero()).unwrap();
        assert!(e.dphi.norm() < 1e-15 && e.domega.norm() < 1e-15);
    }

    #[test]
    fn identity_reference_reduces_to_log() {
        let mut r = sample();
        r.r_d = RotationMatrix::identity();
        let s = state();
        let e = compute_error(&s, &r, &RotationVector::zero()).unwrap();
        let phi = log_so3(&s.r, &RotationVector::zero()).unwrap();
        assert!((e.dphi - phi.0).norm() < 1e-14);
        assert!((e.domega - (s.omega - r.omega_d)).norm() < 1e-15);
    }

    #[test]
    fn reconstruct_inverts_rate_error() {
        let (s, r) = (state(), sample());
        let e = compute_error(&s, &r, &RotationVector::zero()).unwrap();
        assert!((reconstruct_omega(&e.domega, &r) - s.omega).norm() < 1e-12);
        assert_eq!(reconstruct_omega(&Vec3::zeros(), &r), r.omega_d);
    }

    #[test]
    fn stabilizer_at_equilibrium_is_gyroscopic() {
        let mut r = sample();
        r.domega_d = Vec3::zeros();
        let p = SpacecraftParams::reference_scenario();
        let s = BodyState {
            r: r.r_d,
            omega: r.omega_d,
            l_inertial: Vec3::new(3.0, 30.0, -8.0),
        };
        let (tau, _) =
            stabilizer_torque(&p, &s, &r, &Gains::critically_damped(1.2), &Vec3::zeros(), &RotationVector::zero())
                .unwrap();
        let want = r.omega_d.cross(&momentum_body(&s));
        assert!((tau - want).norm() < 1e-12);
    }

    #[test]
    fn lpv_limits() {
        let p = SpacecraftParams::reference_scenario();
        let r = ReferenceSample {
            t: 0.0,
            r_d: RotationMatrix::identity(),
            omega_d: Vec3::zeros(),
            domega_d: Vec3::zeros(),
        };
        let m = lpv_continuous(&p, &r, &Vec3::zeros());
        assert_eq!(m.a.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
        assert_eq!(m.a.fixed_view::<3, 3>(0, 3).into_owned(), Mat3::identity());
        assert_eq!(m.a.fixed_view::<3, 6>(3, 0).into_owned(), nalgebra::Matrix3x6::zeros());
        assert_eq!(m.b.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
        assert!((m.b.fixed_view::<3, 3>(3, 0) - p.inertia_inv()).norm() < 1e-15);
        assert_eq!(m.c, Vector6::zeros());
        // The general case keeps the kinematic rows.
        let m = lpv_continuous(&p, &sample(), &Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(m.a.fixed_view::<3, 3>(0, 3).into_owned(), Mat3::identity());
        assert_eq!(m.b.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
    }

    #[test]
    fn lpv_offset_is_cancelled_by_equilibrium_torque() {
        let p = SpacecraftParams::reference_scenario();
        let r = sample();
        let l = Vec3::new(4.0, -9.0, 2.5);
        let m = lpv_continuous(&p, &r, &l);
        let tau = equilibrium_torque(&p, &r, &l);
        assert!((m.b * tau + m.c).norm() < 1e-14);
    }

    #[test]
    fn lti_eigenvalues_for_scenario_gains() {
        let g = Gains::critically_damped(1.2);
        assert!((g.k_c - 0.36).abs() < 1e-15);
        let (a, b) = lti_continuous(&g);
        let d = DMatrix::from_column_slice(6, 6, a.as_slice());
        // Defective double root: rounding perturbs it by ~sqrt(eps).
        for z in d.complex_eigenvalues().iter() {
            assert!((z.re + 0.6).abs() < 1e-6 && z.im.abs() < 1e-6, "{z}");
        }
        assert_eq!(b.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
        assert_eq!(b.fixed_view::<3, 3>(3, 0).into_owned(), Mat3::identity());
    }

    #[test]
    fn zoh_closed_forms() {
        let dt = 0.1;
        let (a, b, _) = zoh_discretize(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), None, dt);
        assert!((a - DMatrix::identity(2, 2)).norm() < 1e-15);
        assert!((b - DMatrix::identity(2, 2) * dt).norm() < 1e-15);
        let ac = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let bc = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (a, b, c) = zoh_discretize(&ac, &bc, None, dt);
        assert!((a - DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0])).norm() < 1e-15);
        assert!((b - DMatrix::from_row_slice(2, 1, &[dt * dt / 2.0, dt])).norm() < 1e-15);
        assert_eq!(c.norm(), 0.0);
    }

    #[test]
    fn discrete_lti_is_stable() {
        let m = discretize_lti(&Gains::critically_damped(1.2), 0.1);
        let rho = spectral_radius(&m.a);
        assert!(rho < 1.0, "{rho}");
        assert!((rho - (-0.06f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn torque_map_matches_stabilizer() {
        let p = SpacecraftParams::reference_scenario();
        let g = Gains::critically_damped(1.2);
        let r = ConstantRate::new(RotationMatrix::identity(), Vec3::new(0.4, 0.3, 0.0)).sample(2.0);
        let s = state();
        let e = compute_error(&s, &r, &RotationVector::zero()).unwrap();
        let da = Vec3::new(0.01, 0.2, -0.05);
        let (tau, _) = stabilizer_torque(&p, &s, &r, &g, &da, &RotationVector::zero()).unwrap();
        let map = TorqueMap::dual_loop(&p, &r, &momentum_body(&s), &g);
        assert!((map.eval(&e.to_vector(), &da) - tau).norm() < 1e-10);
    }
}
