//! Off-policy evaluation for infinite-horizon MDPs under linear function
//! approximation.
//!
//! The crate provides:
//!
//! - [`mdp`] — finite tabular MDPs, simulation, and an exact Bellman-solve
//!   policy-evaluation oracle used as ground truth everywhere else.
//! - [`features`] — feature maps, policy-averaged features, realizability
//!   checks, and exact feature covariance matrices.
//! - [`hard_instance`] — the three-group lower-bound construction with its
//!   features, linear parameter, sampling distribution, and every analytically
//!   known quantity.
//! - [`sampler`] — reproducible i.i.d. offline datasets.
//! - [`lspe`] — least-squares policy evaluation with the theoretical
//!   regularization schedule, the error decomposition, and the closed-form
//!   error-bound evaluator.
//! - [`diagnostics`] — empirical covariance estimation, matrix-concentration
//!   checks, and assumption audits.
//! - [`lowerbound`] — exact Bayes error of the optimal two-hypothesis
//!   distinguisher, Monte-Carlo trials, and sample-size growth sweeps.
//! - [`tabular`] — randomly generated one-hot tabular instances that satisfy
//!   the low-distribution-shift assumption, used by upper-bound experiments.
//! - [`cli`] — configuration, persistence, and CSV emission for the `ope-lab`
//!   binary.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod hard_instance;
pub mod lowerbound;
pub mod lspe;
pub mod mdp;
pub mod sampler;
pub mod tabular;

pub use error::OpeError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, OpeError>;
