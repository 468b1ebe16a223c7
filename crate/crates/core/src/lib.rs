//! Source-free domain adaptation for RF indoor localization.

// negated comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dann;
pub mod data;
pub mod error;
pub mod eval;
pub mod localizer;
pub mod mtloc;
pub mod nn;
pub mod shot;

pub use error::{Error, Result};
