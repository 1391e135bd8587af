//! JumpLoRA: low-rank adapters whose dense update is gated by a learnable
//! JumpReLU threshold, trained task by task and merged into a frozen base
//! network.

// `!(x > 0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod ella;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
