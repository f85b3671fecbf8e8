//! Command-line front end: JSON configurations in, CSV/JSON artifacts out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundled;
pub mod config;
pub mod error;
pub mod output;
pub mod runner;
