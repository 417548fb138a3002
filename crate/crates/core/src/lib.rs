//! Bayesian covariate-assisted principal regression.
//!
//! Finds orthonormal projections `Γ` of a multivariate signal whose
//! per-subject variances are log-linear in covariates, with full posterior
//! inference by Hamiltonian Monte Carlo on a polar-expanded parametrization.

pub mod cli;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod model;
pub mod sampler;
pub mod selection;
pub mod simulate;
pub mod spd;
pub mod stats;

pub use error::{CapError, Result};
