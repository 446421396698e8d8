//! Siamese CTC training with spatial-temporal dropout and spike-triggered
//! similarity regularization.
// NaN-rejecting checks are written as !(x > 0.0) on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod rng;
pub mod ctc;
pub mod tensor;
pub mod dropout;
pub mod similarity;
pub mod model;
pub mod data;
pub mod exec;
pub mod eval;
pub mod train;
pub mod gradsuite;

pub use error::{Error, Result};
