//! Runtime failure detection and checkpoint respawning for action-chunked
//! control policies.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod conformal;
pub mod ensemble;
pub mod harness;
pub mod error;
mod serial;
pub mod tide;
pub mod tracker;
pub mod types;

pub use error::{Error, ErrorCategory, Result};
