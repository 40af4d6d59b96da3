//! Offline reinforcement learning with a convolutional return-conditioned
//! sequence policy regularized by a learned twin-Q critic.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod ablation;
pub mod critic;
pub mod data;
pub mod envs;
pub mod inference;
pub mod policy;
pub mod trainer;
