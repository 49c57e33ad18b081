//! Imputation estimation for staggered-adoption difference-in-differences.
//!
//! The crate is organized bottom-up: [`panel`] holds the data, [`design`]
//! turns model specifications into sparse regressor matrices, [`lsq`] solves
//! least-squares problems, [`estimator`] and [`weights`] produce point
//! estimates and their implied observation weights, [`inference`] builds
//! conservative standard errors and pre-trend tests, and [`benchmark`] runs
//! the Monte Carlo comparison against reference event-study estimators.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod design;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod lsq;
pub mod panel;
pub mod par;
pub mod weights;

pub use error::{Error, Result};
