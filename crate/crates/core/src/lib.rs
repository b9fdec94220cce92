//! Fisher information laboratory for small classifier networks.
//!
//! The crate computes the exact Fisher information matrix (FIM) of a softmax
//! classifier two ways (definition and Gauss-Newton pullback), its deterministic
//! Loewner-order bounds, and a family of unbiased Hutchinson-probe estimators
//! that need a single backward pass per probe.
//!
//! Layout:
//!
//! - [`core_space`]: geometry of the C-dimensional output space (simplex and
//!   hypercube FIMs, spectra, envelopes, empirical-core statistics).
//! - [`ad`]: a small tape-based reverse-mode AD engine over dense `f64` tensors.
//! - [`network`]: MLP classifiers, parameter layout, per-sample Jacobians.
//! - [`estimators`]: exact, empirical, Monte-Carlo and Hutchinson estimators,
//!   closed-form variances and accumulation utilities.
//! - [`bounds`]: Loewner sandwich bounds and tightness certificates.
//! - [`harness`]: synthetic tasks, training, RelMAE benchmarking, histograms
//!   and the heavy-tail CV demonstration.

pub mod ad;
pub mod bounds;
pub mod core_space;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod network;

pub use error::{FimError, Result};
