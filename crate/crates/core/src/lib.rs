//! Finite-distribution laboratory for the spectral view of multi-modal
//! contrastive learning.
//!
//! Distributions are explicit matrices and encoders are tables of feature
//! rows, so population losses are exact weighted sums.

// `!(x > 0.0)` is how NaN gets rejected alongside bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
