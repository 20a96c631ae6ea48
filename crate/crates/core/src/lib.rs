//! Dyadic grids, Whitney decompositions and square-function diagnostics on
//! discretized Ahlfors-David regular sets.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dyadic;
pub mod error;
pub mod geometry;
pub mod operators;
pub mod par;
pub mod pipeline;
pub mod spatial;
pub mod tb;
pub mod whitney;

pub use error::{Error, Result};
