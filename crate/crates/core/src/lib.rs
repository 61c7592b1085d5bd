//! Estimation of multivariate incremental causal effects under exponential tilting.

pub mod dataset;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod linalg;
pub mod manifold;
pub mod nuisance;
pub mod rng;
pub mod sensitivity;
pub mod simbench;

pub use error::{Error, Result};
