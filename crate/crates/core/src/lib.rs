// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod galerkin;
pub mod linalg;
pub mod models;
pub mod polychaos;
pub mod quadrature;
pub mod randfield;
pub mod sampling;

pub use error::{Error, Result};
