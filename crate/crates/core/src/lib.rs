//! Attitude tracking MPC for a rigid spacecraft with stored momentum.

pub mod dynamics;
pub mod error_system;
pub mod harness;
pub mod mpc;
pub mod qp;
pub mod reference;
pub mod so3;
pub mod terminal;
