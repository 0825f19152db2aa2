// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod complexity;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synthvol;
pub mod tensor;

pub use error::{Error, Result};
