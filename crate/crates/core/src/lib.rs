//! Differentially private SGD with geometry-aware clipping.
//!
//! Per-sample gradients are centered on a running mean, mapped into the basis
//! of the estimated gradient covariance, clipped to unit norm and noised
//! there, then mapped back. The basis is re-estimated from released noisy
//! gradients only, so adapting it costs no privacy.

pub mod accountant;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod modeling;
pub mod privatizer;
pub mod rng;

pub use error::{Error, Result};
