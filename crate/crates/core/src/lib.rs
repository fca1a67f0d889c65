//! Group-relative policy optimization (GRPO) and its parallel relative
//! variants on small softmax sequence policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`policy`]: tabular / linear-feature softmax policies with exact
//!   log-probabilities, seeded sampling and analytic gradients.
//! - [`envs`]: synthetic task suites with K reward dimensions and capability
//!   labels, including suites that cancel under scalar aggregation
//!   (interference) and suites with a large reward-scale disparity.
//! - [`advantage`]: the four group-standardized advantage estimators built on
//!   one statistics kernel.
//! - [`partition`]: capability partitioning, outlier detection and relegation.
//! - [`objective`]: clipped surrogate values and exact gradients, KL penalty,
//!   training loop.
//! - [`oracle`]: finite differences, exhaustive enumeration and a naive
//!   re-implementation of every advantage formula.
//! - [`harness`]: configuration, experiment runs and file outputs.

pub mod advantage;
pub mod envs;
pub mod error;
pub mod harness;
pub mod objective;
pub mod oracle;
pub mod partition;
pub mod policy;
pub mod rollout;
pub mod seed;

pub use error::{Error, Result};
