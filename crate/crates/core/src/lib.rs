//! Instrumented mini-batch SGD for small models, with information-theoretic
//! generalization bounds built from gradient dispersion and loss flatness, and
//! two training schemes derived from them: dynamic gradient clipping and
//! Gaussian model perturbation.
//!
//! Modules, bottom up:
//! - [`numerics`]: seeded streams, parameter vectors, finite differences.
//! - [`data`]: datasets, generators, label noise, the batching trajectory.
//! - [`models`]: linear, two-layer ReLU and MLP models with analytic gradients.
//! - [`training`]: the SGD loop, clipping, perturbation and the step trace.
//! - [`estimators`]: dispersion, sensitivity, Hessian trace, flatness, `R`.
//! - [`bounds`]: every bound variant assembled from the above.
//! - [`cli`]: the `genbound` experiment harness.

pub mod bounds;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{ParamVector, SeededStream};
