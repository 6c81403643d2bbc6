//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument failed validation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An item index was outside `[0, n_items)`.
    #[error("item index {index} out of range for {n_items} items")]
    IndexOutOfRange { index: usize, n_items: usize },

    /// The SVD iteration did not converge.
    #[error("SVD failed to converge for a {dim}x{dim} matrix ({detail})")]
    SvdConvergence { dim: usize, detail: String },

    /// A symmetric factor could not be Cholesky-factored even after adding the ridge.
    #[error("{context} is numerically singular (ridge {ridge:.3e}, min diagonal {min_diag:.3e})")]
    SingularFactor {
        context: &'static str,
        ridge: f64,
        min_diag: f64,
    },

    /// A singular value left the convergence interval of a Newton-Schulz polynomial.
    #[error(
        "Newton-Schulz domain violation: singular value {singular_value:.6e} \
         exceeds the convergence bound {bound:.6e} after prescaling"
    )]
    NewtonSchulzDomain { singular_value: f64, bound: f64 },

    /// An operation that is only defined at zero initialization was called on a nonzero matrix.
    #[error("operation requires the zero weight matrix, got one with max entry {norm:.3e}")]
    NonZeroInit { norm: f64 },

    /// A matrix contained NaN or infinite entries.
    #[error("non-finite entries encountered in {context}")]
    NonFinite { context: String },

    /// Too few usable points for a regression.
    #[error("not enough points to fit: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    /// A regime needed by an estimator was absent from the data.
    #[error("estimation failed: no {regime} present in the capacity-vs-batch series")]
    MissingRegime { regime: &'static str },

    /// A trajectory aborted partway through.
    #[error("trajectory failed at step {step}: {source}")]
    Trajectory {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
