//! Solver and simulation toolkit for linear-quadratic mean field games
//! (MFG) whose common noise is a finite-state continuous-time Markov
//! chain (regime switching).
//!
//! The toolkit covers four layers:
//!
//! 1. **Model** ([`model`]): validated problem data — chain generator,
//!    per-regime drift/control coefficients, quadratic cost weights,
//!    initial law moments, and the time grid.
//! 2. **Deterministic solvers** ([`riccati`], [`nplayer`]): backward
//!    Runge–Kutta integration of the coupled Riccati ODE systems that
//!    characterize the mean-field equilibrium, the N-player equilibrium
//!    (both the full matrix system and its N-invariant reduction), the
//!    truncated Picard fixed-point scheme, and the closed-form solutions
//!    available without common noise.
//! 3. **Stochastic simulation** ([`ctmc`], [`paths`]): exact jump-time
//!    sampling of the common noise, Euler–Maruyama simulation of the
//!    equilibrium state processes on jump-refined grids, conditional
//!    moment ODEs, and the explicit coupling that realizes the generic
//!    N-player path on a two-Brownian-motion probability space.
//! 4. **Convergence estimation** ([`convergence`]): Monte Carlo coupled-gap
//!    statistics bounding the 2-Wasserstein distance, coefficient-gap
//!    rates, empirical one-dimensional Wasserstein distances, and log-log
//!    rate regression.
//!
//! All solvers are pure functions over immutable inputs; all simulators
//! consume explicit, counter-based random streams so every run is
//! reproducible from a single seed.

// Index loops over parallel per-state arrays read better than zipped
// iterator chains in the ODE right-hand sides.
#![allow(clippy::needless_range_loop)]

pub mod convergence;
pub mod ctmc;
pub mod model;
pub mod nplayer;
pub mod paths;
pub mod riccati;

pub use model::{
    load_model, CoefficientCurves, ConfigFormat, CostParams, Generator, InitialLaw, ModelError,
    ModelSpec, TimeGrid,
};
pub use riccati::{RiccatiMFG, Scheme, SolveError};
