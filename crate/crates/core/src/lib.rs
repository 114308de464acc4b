//! Simulation and verification toolkit for the linear transport equation
//! `∂_t u + ∂_x u (b(t,x) + dZ/dt) = 0` driven by a zero quadratic
//! variation noise `Z` (fBm or a Hermite process with `H > 1/2`).
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: the discretized Wiener path every random object derives from.
//! * [`noise`]: fBm / Hermite synthesis and their kernels.
//! * [`calculus`]: ε-regularized symmetric integrals and covariations.
//! * [`flow`]: forward, backward and reversed stochastic characteristics.
//! * [`transport`]: the solution by characteristics and the weak formulation.
//! * [`malliavin`]: lattice Malliavin derivatives and density diagnostics.
//! * [`experiment`]: configuration, reports and the CLI driver.

pub mod calculus;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod lattice;
pub mod malliavin;
pub mod noise;
pub mod quadrature;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
