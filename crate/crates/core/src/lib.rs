//! Training-data attribution for SGD and AdamW trajectories.
//!
//! The crate records training trajectories, runs the backward influence
//! recurrences for both optimizers, retrains to obtain leave-one-out ground
//! truth, and drives analyses and influence-guided data selection on top.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attribution;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod math;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod selection;
pub mod trajectory;

pub use error::{Error, Result};
