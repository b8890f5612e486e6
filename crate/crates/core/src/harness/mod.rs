//! Simulation, benchmark and command-line harness.

pub mod benchmark;
pub mod cli;
pub mod config;
pub mod plot;
pub mod simulate;
