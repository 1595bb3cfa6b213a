//! Model-free policy iteration for continuous-time LQR with
//! state- and control-dependent noise, plus the model-based solvers and
//! the simulation and sweep tooling used to check it.
//!
//! The learner ([`adp`]) only sees trajectories through
//! [`adp::Environment`]; the model ([`model`], [`riccati`]) is used to build
//! simulated plants and reference solutions.

pub mod adp;
pub mod error;
pub mod expectation;
pub mod harness;
pub mod linops;
pub mod model;
pub mod plot;
pub mod rng;
pub mod riccati;
pub mod sde;

pub use error::{Error, Result};
pub use linops::{Matrix, Vector};
pub use model::{InitialStateSpec, LinearStochasticSystem};
