//! Reference attitude trajectories `(R_d, omega_d, domega_d)`.

use crate::so3::{exp_so3, skew, Mat3, RotationMatrix, RotationVector, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub t: f64,
    pub r_d: RotationMatrix,
    pub omega_d: Vec3,
    pub domega_d: Vec3,
}

/// A reference is a pure function of time.
pub trait Reference {
    fn sample(&self, t: f64) -> ReferenceSample;
}

impl<R: Reference + ?Sized> Reference for &R {
    fn sample(&self, t: f64) -> ReferenceSample {
        (**self).sample(t)
    }
}

/// Constant body-frame rate: `R_d(t) = R_d0 exp(t omega_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRate {
    pub r_d0: RotationMatrix,
    pub omega_d: Vec3,
}

impl ConstantRate {
    pub fn new(r_d0: RotationMatrix, omega_d: Vec3) -> Self {
        Self { r_d0, omega_d }
    }
}

impl Reference for ConstantRate {
    fn sample(&self, t: f64) -> ReferenceSample {
        ReferenceSample {
            t,
            r_d: self.r_d0.compose(&exp_so3(&RotationVector(self.omega_d * t))),
            omega_d: self.omega_d,
            domega_d: Vec3::zeros(),
        }
    }
}

/// Rate given by a polynomial per axis on consecutive segments; the attitude
/// is integrated with RK4 on the manifold from knots cached at construction.
#[derive(Debug, Clone)]
pub struct PiecewisePolynomialRate {
    r_d0: RotationMatrix,
    /// `(segment start, coefficients per axis in ascending powers of t - start)`.
    segments: Vec<(f64, [Vec<f64>; 3])>,
    step: f64,
    knots: Vec<RotationMatrix>,
}

impl PiecewisePolynomialRate {
    /// `segments` must be sorted by start time and the first start is `0`.
    /// Attitudes are cached on `[0, horizon]` with integration step `step`.
    pub fn new(
        r_d0: RotationMatrix,
        segments: Vec<(f64, [Vec<f64>; 3])>,
        horizon: f64,
        step: f64,
    ) -> Self {
        assert!(step > 0.0 && horizon >= 0.0);
        assert!(segments.first().map(|s| s.0) == Some(0.0), "first segment must start at 0");
        let mut me = Self {
            r_d0,
            segments,
            step,
            knots: vec![r_d0],
        };
        let n = (horizon / step).ceil() as usize;
        let mut r = r_d0;
        for k in 0..n {
            r = me.advance(&r, k as f64 * step, step);
            me.knots.push(r);
        }
        me
    }

    fn segment(&self, t: f64) -> &(f64, [Vec<f64>; 3]) {
        let i = self.segments.partition_point(|s| s.0 <= t).saturating_sub(1);
        &self.segments[i]
    }

    pub fn rate(&self, t: f64) -> (Vec3, Vec3) {
        let (t0, coeffs) = self.segment(t);
        let s = t - t0;
        let mut w = Vec3::zeros();
        let mut dw = Vec3::zeros();
        for axis in 0..3 {
            for c in coeffs[axis].iter().rev() {
                w[axis] = w[axis] * s + c;
            }
            for (p, c) in coeffs[axis].iter().enumerate().skip(1).rev() {
                dw[axis] = dw[axis] * s + p as f64 * c;
            }
        }
        (w, dw)
    }

    /// RK4 on `dphi` with `R(t + h) = R(t) exp(dphi)`.
    fn advance(&self, r: &RotationMatrix, t: f64, h: f64) -> RotationMatrix {
        let f = |dphi: &Vec3, tau: f64| -> Vec3 {
            let (w, _) = self.rate(t + tau);
            crate::so3::bortz_rate(&RotationVector(*dphi), &w).expect("small increment")
        };
        let z = Vec3::zeros();
        let k1 = f(&z, 0.0);
        let k2 = f(&(0.5 * h * k1), 0.5 * h);
        let k3 = f(&(0.5 * h * k2), 0.5 * h);
        let k4 = f(&(h * k3), h);
        let dphi = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        r.compose(&exp_so3(&RotationVector(dphi)))
    }
}

impl Reference for PiecewisePolynomialRate {
    fn sample(&self, t: f64) -> ReferenceSample {
        let (omega_d, domega_d) = self.rate(t);
        let r_d = if t <= 0.0 {
            self.advance(&self.r_d0, 0.0, t)
        } else {
            // Past the cached range the last knot is advanced in one step.
            let k = ((t / self.step).floor() as usize).min(self.knots.len() - 1);
            let t_k = k as f64 * self.step;
            self.advance(&self.knots[k], t_k, t - t_k)
        };
        ReferenceSample {
            t,
            r_d,
            omega_d,
            domega_d,
        }
    }
}

/// Samples at `t0 + k dt` for `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    pub dt: f64,
    pub samples: Vec<ReferenceSample>,
}

impl ReferenceGrid {
    pub fn horizon(&self) -> usize {
        self.samples.len() - 1
    }
}

pub fn sample_grid(reference: &dyn Reference, t0: f64, dt: f64, n: usize) -> ReferenceGrid {
    assert!(dt > 0.0 && n >= 1, "grid needs dt > 0 and n >= 1");
    ReferenceGrid {
        dt,
        samples: (0..=n).map(|k| reference.sample(t0 + k as f64 * dt)).collect(),
    }
}

/// Max-abs entry of `(R_d(t+h) - R_d(t-h)) / 2h - R_d(t) skew(omega_d(t))`.
pub fn kinematic_residual(reference: &dyn Reference, t: f64, h: f64) -> f64 {
    let s = reference.sample(t);
    let fd: Mat3 = (reference.sample(t + h).r_d.matrix() - reference.sample(t - h).r_d.matrix()) / (2.0 * h);
    (fd - s.r_d.matrix() * skew(&s.omega_d)).abs().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn scenario_reference() -> ConstantRate {
        ConstantRate::new(
            exp_so3(&RotationVector::new(0.2, -0.1, 0.3)),
            Vec3::new(0.4, 0.3, 0.0),
        )
    }

    #[test]
    fn constant_rate_initial_and_periodic() {
        let r = scenario_reference();
        assert_eq!(r.sample(0.0).r_d, r.r_d0);
        let period = 2.0 * PI / r.omega_d.norm();
        assert!((r.sample(period).r_d.matrix() - r.r_d0.matrix()).norm() < 1e-12);
        assert_eq!(r.sample(3.0).domega_d, Vec3::zeros());
    }

    #[test]
    fn constant_rate_is_kinematically_consistent() {
        let r = scenario_reference();
        for k in 0..50 {
            assert!(kinematic_residual(&r, 0.37 * k as f64, 1e-5) < 1e-6);
        }
    }

    #[test]
    fn grid_spacing_and_group_property() {
        let r = scenario_reference();
        let g = sample_grid(&r, 1.0, 0.1, 1);
        assert_eq!(g.samples.len(), 2);
        assert_eq!(g.samples[1].t, 1.1);
        let g = sample_grid(&r, 2.0, 0.1, 11);
        assert_eq!(g.samples.len(), 12);
        let step = exp_so3(&RotationVector(r.omega_d * 0.1));
        for w in g.samples.windows(2) {
            assert!((w[0].r_d.compose(&step).matrix() - w[1].r_d.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn polynomial_rate_is_consistent() {
        let segs = vec![
            (0.0, [vec![0.1, 0.05], vec![0.0, 0.0, 0.02], vec![-0.2]]),
            (2.0, [vec![0.2, -0.03], vec![0.08, 0.08], vec![-0.2, 0.01, 0.001]]),
        ];
        let r = PiecewisePolynomialRate::new(RotationMatrix::identity(), segs, 6.0, 1e-3);
        let (w, dw) = r.rate(2.5);
        assert!((w - Vec3::new(0.2 - 0.015, 0.08 + 0.04, -0.2 + 0.005 + 0.00025)).norm() < 1e-14);
        assert!((dw - Vec3::new(-0.03, 0.08, 0.01 + 0.001)).norm() < 1e-14);
        for t in [0.3, 1.7, 2.6, 4.05, 5.5] {
            assert!(kinematic_residual(&r, t, 1e-5) < 1e-6, "t={t}");
        }
        let g = sample_grid(&r, 0.0, 0.5, 10);
        for s in &g.samples {
            assert!(s.r_d.orthonormality_defect() < 1e-12);
        }
    }
}
