//! Laboratory library for linear associative memory under spectral
//! optimizers.
//!
//! The model stores token associations in a single `d x d` matrix trained by
//! one or more steps of SGD, Muon (exact polar, stabilized, or
//! Newton-Schulz), or a Kronecker-factored Newton step on a softmax
//! cross-entropy objective with power-law item frequencies. The crate
//! measures storage capacity (strict argmax recovery), estimates critical
//! batch sizes, and fits capacity scaling exponents.
//!
//! Module map:
//!
//! - [`dist`]: item frequencies, Gaussian embeddings, minibatch draws
//! - [`objective`]: logits, loss, gradients, Hessian factors at zero
//! - [`spectral`]: SVD-backed spectral maps and derivative oracles
//! - [`optim`]: update rules, schedules, trajectory runner
//! - [`capacity`]: recovery metrics and critical batch estimation
//! - [`fit`]: log-log exponent fitting
//! - [`selftest`]: the oracle/property suite

pub mod capacity;
pub mod dist;
pub mod error;
pub mod fit;
mod kernel;
pub mod objective;
pub mod optim;
pub mod selftest;
pub mod spectral;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    pub(crate) use crate::selftest::util::{random_matrix, random_orthogonal};
}
