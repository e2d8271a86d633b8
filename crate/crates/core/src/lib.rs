//! Max-min energy-efficiency optimization for STAR-RIS-assisted
//! rate-splitting MIMO downlinks under finite-blocklength rates.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod check;
pub mod config;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod rates;
pub mod solver;
pub mod surrogate;

pub use error::{Error, Result};
