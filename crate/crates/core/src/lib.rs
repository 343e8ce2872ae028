//! Normalizing-flow density estimation built from first principles.
//!
//! The crate bundles a small reverse-mode engine ([`nn`]), three flow
//! families ([`bijectors`]: RealNVP coupling, masked autoregressive affine and
//! autoregressive rational-quadratic splines), analytic toy targets
//! ([`distributions`]), maximum-likelihood training ([`flow`]), the
//! non-parametric evaluation metrics ([`metrics`]) and a sweep harness
//! ([`sweep`]) that ties them together.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch;
// index loops mirror the triangular-solve formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bijectors;
pub mod distributions;
mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod sweep;

pub use error::{Error, Result};
