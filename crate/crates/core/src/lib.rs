//! Capacity-fade forecasting for lithium-ion cells from usage statistics.
//!
//! Cycling streams are reduced to time-in-range features per fixed chunk,
//! a greedy correlation filter picks a few of them, and a GP maps them to
//! per-chunk capacity change. Summing predicted changes gives the full
//! trajectory, from which knee point and end of life are read off.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod features;
pub mod gpr;
pub mod harness;
pub mod ingest;
pub mod plots;
pub mod selection;
pub mod stats;
pub mod synthgen;
pub mod trajectory;

pub use error::{Error, Result};
