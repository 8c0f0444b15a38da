#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Fine-grained controllable text-to-audio generation at desk scale.

pub mod conditions;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
