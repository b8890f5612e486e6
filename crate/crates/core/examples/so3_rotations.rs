//! Rotation vectors, the branch hint of the logarithm and the Bortz rate.

use attitude_mpc::so3::{bortz_rate, exp_so3, log_so3, RotationVector, Vec3};

fn main() {
    let phi = RotationVector::new(0.3, -1.1, 0.7);
    let r = exp_so3(&phi);
    let back = log_so3(&r, &RotationVector::zero()).expect("valid rotation");
    println!("phi           {:?}", phi.0.as_slice());
    println!("log(exp(phi)) {:?}", back.0.as_slice());
    println!("orthonormality defect {:.2e}", r.orthonormality_defect());

    // Spin past pi about one axis: the hint keeps the rotation vector continuous.
    let axis = Vec3::new(0.0, 0.6, 0.8);
    let mut hint = RotationVector::zero();
    println!("\n angle   principal |log|   tracked |log|");
    for k in 0..=8 {
        let angle = 2.8 + 0.1 * k as f64;
        let r = exp_so3(&RotationVector(axis * angle));
        let principal = log_so3(&r, &RotationVector::zero()).expect("valid rotation");
        let tracked = log_so3(&r, &hint).expect("valid rotation");
        println!("{angle:6.2}   {:13.4}   {:13.4}", principal.angle(), tracked.angle());
        hint = tracked;
    }

    let omega = Vec3::new(0.4, 0.3, 0.0);
    let rate = bortz_rate(&phi, &omega).expect("angle below 2 pi");
    println!("\nbortz rate for omega {:?}: {:?}", omega.as_slice(), rate.as_slice());
    println!("phi . rate = {:.6}, phi . omega = {:.6}", phi.0.dot(&rate), phi.0.dot(&omega));
}
