//! Rigid spacecraft with momentum-exchange actuation.
//!
//! The wheels are abstracted to a body torque with box limits. Total angular
//! momentum is fixed in the inertial frame; its body-frame image is
//! recomputed from the attitude wherever the dynamics need it.

use nalgebra::{SVector, Vector6};
use thiserror::Error;

use crate::so3::{bortz_rate, exp_so3, Mat3, RotationMatrix, RotationVector, So3Error, Vec3};

/// Steps between polar re-orthonormalizations in [`Simulator`].
pub const REORTHONORMALIZE_EVERY: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("inertia tensor is not symmetric (asymmetry {0:.3e})")]
    InertiaNotSymmetric(f64),
    #[error("inertia tensor is not positive definite")]
    InertiaNotPositiveDefinite,
    #[error("{name} lower bound {lower} is not below upper bound {upper} on axis {axis}")]
    EmptyBox {
        name: &'static str,
        axis: usize,
        lower: f64,
        upper: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacecraftParams {
    inertia: Mat3,
    inertia_inv: Mat3,
    pub tau_min: Vec3,
    pub tau_max: Vec3,
    pub omega_min: Vec3,
    pub omega_max: Vec3,
}

impl SpacecraftParams {
    pub fn new(
        inertia: Mat3,
        tau_min: Vec3,
        tau_max: Vec3,
        omega_min: Vec3,
        omega_max: Vec3,
    ) -> Result<Self, ParamsError> {
        let asym = (inertia - inertia.transpose()).abs().max();
        if asym > 1e-12 * inertia.abs().max().max(1.0) {
            return Err(ParamsError::InertiaNotSymmetric(asym));
        }
        let chol = inertia.cholesky().ok_or(ParamsError::InertiaNotPositiveDefinite)?;
        for (name, lo, hi) in [("torque", &tau_min, &tau_max), ("angular velocity", &omega_min, &omega_max)] {
            for axis in 0..3 {
                if !(lo[axis] < hi[axis]) {
                    return Err(ParamsError::EmptyBox {
                        name,
                        axis,
                        lower: lo[axis],
                        upper: hi[axis],
                    });
                }
            }
        }
        Ok(Self {
            inertia,
            inertia_inv: chol.inverse(),
            tau_min,
            tau_max,
            omega_min,
            omega_max,
        })
    }

    /// J = diag(85, 94, 92) kg m^2, |tau| <= 40 N m, |omega| <= 0.5 rad/s.
    pub fn reference_scenario() -> Self {
        Self::new(
            Mat3::from_diagonal(&Vec3::new(85.0, 94.0, 92.0)),
            Vec3::repeat(-40.0),
            Vec3::repeat(40.0),
            Vec3::repeat(-0.5),
            Vec3::repeat(0.5),
        )
        .expect("reference parameters are valid")
    }

    pub fn inertia(&self) -> &Mat3 {
        &self.inertia
    }

    pub fn inertia_inv(&self) -> &Mat3 {
        &self.inertia_inv
    }

    pub fn clip_torque(&self, tau: &Vec3) -> Vec3 {
        tau.zip_zip_map(&self.tau_min, &self.tau_max, |t, lo, hi| t.clamp(lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    /// Body to inertial.
    pub r: RotationMatrix,
    /// Body-frame angular velocity, rad/s.
    pub omega: Vec3,
    /// Total angular momentum in the inertial frame, N m s.
    pub l_inertial: Vec3,
}

/// L expressed in the body frame.
pub fn momentum_body(state: &BodyState) -> Vec3 {
    state.r.matrix().transpose() * state.l_inertial
}

/// `J^{-1} (tau - omega x L)`.
pub fn angular_accel(params: &SpacecraftParams, omega: &Vec3, l_body: &Vec3, tau: &Vec3) -> Vec3 {
    params.inertia_inv * (tau - omega.cross(l_body))
}

type Y = Vector6<f64>;

fn split(y: &Y) -> (Vec3, Vec3) {
    (y.fixed_rows::<3>(0).into_owned(), y.fixed_rows::<3>(3).into_owned())
}

fn join(a: Vec3, b: Vec3) -> Y {
    let mut y = Y::zeros();
    y.fixed_rows_mut::<3>(0).copy_from(&a);
    y.fixed_rows_mut::<3>(3).copy_from(&b);
    y
}

/// One RK4 step where the torque may depend on the intermediate state.
/// `torque` receives the stage time offset within the step and the state.
///
/// The attitude is carried as `r0 * exp(dphi)` with `dphi` integrated by
/// the Bortz equation, so the update stays on SO(3) up to rounding.
pub fn step_plant_with<F>(
    params: &SpacecraftParams,
    state: &BodyState,
    dt: f64,
    mut torque: F,
) -> Result<BodyState, So3Error>
where
    F: FnMut(f64, &BodyState) -> Vec3,
{
    debug_assert!(dt != 0.0);
    let r0 = state.r;
    let at = |y: &Y| -> BodyState {
        let (dphi, omega) = split(y);
        BodyState {
            r: r0.compose(&exp_so3(&RotationVector(dphi))),
            omega,
            l_inertial: state.l_inertial,
        }
    };
    let mut rhs = |offset: f64, y: &Y| -> Result<Y, So3Error> {
        let s = at(y);
        let (dphi, omega) = split(y);
        let tau = torque(offset, &s);
        let l_body = momentum_body(&s);
        Ok(join(
            bortz_rate(&RotationVector(dphi), &omega)?,
            angular_accel(params, &omega, &l_body, &tau),
        ))
    };
    let y0 = join(Vec3::zeros(), state.omega);
    let k1 = rhs(0.0, &y0)?;
    let k2 = rhs(0.5 * dt, &(y0 + 0.5 * dt * k1))?;
    let k3 = rhs(0.5 * dt, &(y0 + 0.5 * dt * k2))?;
    let k4 = rhs(dt, &(y0 + dt * k3))?;
    let y1 = y0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    Ok(at(&y1))
}

/// One RK4 step with `tau` held constant over `dt`.
pub fn step_plant(params: &SpacecraftParams, state: &BodyState, tau: &Vec3, dt: f64) -> BodyState {
    // Increments over one step are |omega| dt, far from the 2 pi singularity.
    step_plant_with(params, state, dt, |_, _| *tau).expect("attitude increment below 2 pi")
}

/// Stateful wrapper that re-orthonormalizes the attitude periodically.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub params: SpacecraftParams,
    pub state: BodyState,
    steps: usize,
}

impl Simulator {
    pub fn new(params: SpacecraftParams, state: BodyState) -> Self {
        Self {
            params,
            state,
            steps: 0,
        }
    }

    pub fn step(&mut self, tau: &Vec3, dt: f64) -> &BodyState {
        self.state = step_plant(&self.params, &self.state, tau, dt);
        self.after_step();
        &self.state
    }

    pub fn step_feedback<F>(&mut self, dt: f64, torque: F) -> Result<&BodyState, So3Error>
    where
        F: FnMut(f64, &BodyState) -> Vec3,
    {
        self.state = step_plant_with(&self.params, &self.state, dt, torque)?;
        self.after_step();
        Ok(&self.state)
    }

    fn after_step(&mut self) {
        self.steps += 1;
        if self.steps.is_multiple_of(REORTHONORMALIZE_EVERY) {
            self.state.r = self.state.r.reorthonormalize();
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Stacks `(phi-like, omega-like)` halves into one vector.
pub fn stack(a: &Vec3, b: &Vec3) -> SVector<f64, 6> {
    join(*a, *b)
}
