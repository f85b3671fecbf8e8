#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coarse_grain;
pub mod control;
pub mod dictionary;
pub mod error;
pub mod generator;
pub mod linalg;
pub mod models;
pub mod spectral;
pub mod sysid;

pub use error::{Error, Result};
