//! Testing additivity of a regression function when the response is right
//! censored.
//!
//! The pipeline runs from a [`survival::CensoredSample`] through the
//! Kaplan–Meier estimate of the censoring law, inverse-probability-weighted
//! responses, a marginal-integration additive fit and the kernel-smoothed
//! residual statistic, to a standardized value with a normal p-value.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod additive;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod pipeline;
pub mod plan;
pub mod quadrature;
pub mod simulate;
pub mod smoothing;
pub mod survival;
pub mod testing;

pub use error::{Error, Result};
pub use pipeline::{run_pipeline, TestConfig};
pub use survival::CensoredSample;
