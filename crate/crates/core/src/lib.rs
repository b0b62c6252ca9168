//! Federated learning simulator with user-level differential privacy.
//!
//! Every client perturbs its locally trained model with Gaussian noise whose
//! standard deviation is calibrated from its own `(epsilon, delta)` budget, the
//! sampling ratio `q = K/U` and the planned number of communication rounds.
//! The round budget itself can be shrunk online by the discounting scheduler,
//! in which case the remaining noise is recalibrated from the already-spent
//! inverse variance.
//!
//! Modules:
//! - [`accountant`]: sensitivity, moment bounds, exact moments and noise calibration.
//! - [`models`]: SVM, logistic regression and a one-hidden-layer MLP with
//!   per-sample gradients and L2 clipping.
//! - [`federation`]: client sampling, noising, aggregation and the round loop.
//! - [`scheduler`]: fixed, discounting, linear-decay and exhaustive-search policies.
//! - [`data`]: IDX/CSV loading, synthetic data and client partitioning.
//! - [`harness`]: experiment configuration, runs, sweeps and reports.

// Negated comparisons are used deliberately so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod models;
pub mod par;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
