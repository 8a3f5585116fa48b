//! Unrolled, prompt-conditioned recurrent network for undersampled dynamic
//! multi-coil MRI reconstruction, with data simulation, training and
//! evaluation utilities.

// Negated comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod kspace;
pub mod nn;
pub mod objectives;
pub mod prompts;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
