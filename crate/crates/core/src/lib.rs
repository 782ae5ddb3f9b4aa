//! Backward stochastic differential equations whose coupling term is a
//! nonlinear Young integral `∫ g(Y_r) η(dr, X_r)` against a rough
//! space-time driver `η`.
//!
//! The crate is organised bottom-up:
//!
//! * [`paths`]: time grids, sampled paths, p-variation, Hölder and uniform
//!   norms, controls.
//! * [`driver`]: driver fields (analytic, fractional Brownian sheet,
//!   mollified, time-shifted), seminorm estimates and assumption checks.
//! * [`sewing`]: dyadic sewing of germs, nonlinear Young integrals and
//!   remainder certificates.
//! * [`flow`]: linear Young flows, their inverses and the scalar exponential
//!   formula.
//! * [`forward`]: Euler–Maruyama ensembles, exit times, reflection.
//! * [`bsde`]: regression Monte Carlo solver, closed-form linear solution,
//!   comparison and localization experiments.
//! * [`pde`]: finite-difference Dirichlet solver and Feynman–Kac checks.
//!
//! Monte Carlo loops run on rayon when the `parallel` feature is enabled
//! (default). Every random number is keyed by `(seed, path, step)`, so
//! results are identical for any thread count and with the feature off.

pub mod bsde;
pub mod driver;
pub mod error;
pub mod flow;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod par;
pub mod paths;
pub mod pde;
pub mod rng;
pub mod sewing;
pub mod stats;

pub use error::{Error, Result};
