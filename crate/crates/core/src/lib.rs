// `!(a < b)` is used throughout to reject NaN along with out-of-order values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expr;
pub mod grid;
pub mod lln;
pub mod models;
pub mod operators;
pub mod particles;
pub mod pde;
pub mod spectral;
pub mod stats;
pub mod tridiag;

pub use error::{Error, Result};
