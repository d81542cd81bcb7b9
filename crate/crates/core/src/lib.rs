//! Numerical toolkit for time-inconsistent stochastic control of controlled
//! Itô diffusions.
//!
//! The crate is organised around the objects of the theory:
//!
//! * [`model`]: problem data (dynamics, control set, payoffs `F`, `G`, `H`)
//!   and spot checks of the standing assumptions.
//! * [`grids`]: rectangular lattices, tabulated functions, the finite
//!   difference generator `A^u`, the `H`-operator and the diamond composition.
//! * [`sde`]: Euler–Maruyama simulation, Monte Carlo estimates of the
//!   auxiliary functions and spike (deviation) controls.
//! * [`equilibrium`]: spike-perturbation tests of the equilibrium inequality.
//! * [`hjbx`]: residuals of the extended HJB system and an explicit
//!   policy-iteration solver.
//! * [`regulator`]: the time-inconsistent quadratic regulator used as a
//!   closed-form oracle.
//! * [`cli`]: config loading and the command line runs.

pub mod cli;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod grids;
pub mod hjbx;
pub mod model;
pub mod regulator;
pub mod report;
pub mod sde;

pub use error::{Error, EvalError, Result};
