//! Nuisance learners: regressors and the conditional exposure density.

pub mod exposure;
pub mod gbt;
pub mod regressor;

pub use exposure::{fit_exposure_model, ConditionalExposureModel, Marginal, ResidualFamily};
pub use gbt::GbtParams;
pub use regressor::{FittedRegressor, RegressorSpec};
