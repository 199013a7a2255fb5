//! Amortized neural-operator toolkit for open- and closed-loop optimal
//! control.
//!
//! The crate learns mappings from problem instances (obstacle field, initial
//! state, optional target) to open-loop controls by minimizing the control
//! objective through a differentiable forward-Euler rollout, then reuses the
//! learned operator inside an MPC loop. It ships per-instance reference
//! solvers, an analytic scalar-LQR oracle and a scaling-law experiment
//! harness; the `opctl` binary exposes all of it.

pub mod autodiff;
pub mod cost;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod rng;
pub mod task;

pub use error::{Error, Result};
