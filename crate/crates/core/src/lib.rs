// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod completion;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod net;
pub mod spatial;
pub mod trainer;

pub use error::{Error, Result};
