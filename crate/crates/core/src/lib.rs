//! Adversarially trained Bayesian neural networks at desk scale.
//!
//! Variational weights `w = μ + exp(s)·ε` with a Gaussian prior, PGD/EOT
//! attacks, four training defenses, ensemble prediction and the evaluation
//! studies built on top.

pub mod attacks;
pub mod bayes;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod nd;
pub mod objectives;
pub mod train;

pub use bayes::{network_forward, EpsBundle, Network, NetworkSpec, Realization};
pub use error::{Error, Result};
pub use nd::{DType, Real, StreamKey, Tensor};
