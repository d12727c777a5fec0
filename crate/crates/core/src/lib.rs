//! Simulation and verification engine for a two-trader bosonic market model.

pub mod fock;
pub mod model;
pub mod propagate;
pub mod perturb;
pub mod harness;
pub mod scenario;
pub mod cli;
