//! Deconditional kernel mean embeddings and task-transformed Gaussian
//! processes.
//!
//! The crate recovers a function `f: X -> R` when only noisy observations of
//! its conditional mean `g(y) = E[f(X) | Y = y]` are available, together with
//! a separate sample of `(x, y)` pairs linking the two spaces. It provides the
//! closed-form estimators, their Gaussian-process counterparts with marginal
//! likelihoods for hyperparameter learning, sparse inducing-point learning,
//! the kernel Bayes' rule variants, and a likelihood-free inference pipeline
//! built on kernel herding.

pub mod dme;
pub mod embeddings;
pub mod error;
pub mod gpr;
pub mod kernels;
pub mod lfi;
pub mod linalg;
pub mod optim;
pub mod ttgp;
pub mod ttr_data;

pub use error::{Error, Result};
