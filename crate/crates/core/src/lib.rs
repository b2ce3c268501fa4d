//! Selective inference for group-wide signal through supervised prototypes.
//!
//! A group of predictors is summarised by a single derived feature, its
//! prototype `H y`, where `H` is a least-squares, ridge or lasso-refit hat
//! matrix fitted on the group alone. Because the prototype is built from the
//! response, classical reference distributions are invalid; the tests in this
//! crate condition on the selection event `{y : A y <= b}` instead.
//!
//! Layout:
//! - [`linalg`]: grouped designs, hat operators, `G(theta) = I - sum theta_k H_k`
//!   and its inverse / log-determinant by three interchangeable routes.
//! - [`likelihood`]: log-likelihood of the prototype model and its Newton fit.
//! - [`selection`]: lasso and marginal-screening selection events.
//! - [`sampler`]: hit-and-run sampling of constrained Gaussians.
//! - [`truncation`]: analytic truncated reference distributions.
//! - [`univariate`], [`multivariate`]: the test rosters.
//! - [`estimation`]: penalized prototype estimators and their comparison study.
//! - [`harness`]: designs, responses, presets, experiment runner, benchmarks.

pub mod dist;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod likelihood;
pub mod linalg;
pub mod multivariate;
pub mod rng;
pub mod sampler;
pub mod selection;
pub mod stats;
pub mod truncation;
pub mod univariate;

pub use error::{Error, Result};
