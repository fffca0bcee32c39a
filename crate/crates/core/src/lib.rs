//! Pruning-in-combination with quantization for small convolutional networks.

// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod evosearch;
pub mod gradcheck;
pub mod model;
pub mod picplan;
pub mod pipeline;
pub mod quantize;
pub mod rankfp;
pub mod spec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
