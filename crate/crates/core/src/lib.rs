#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diffcore;
pub mod elicitation;
pub mod error;
pub mod loss;
pub mod models;
pub mod samplers;
pub mod studies;
pub mod trainer;

pub use error::{Error, Result};
