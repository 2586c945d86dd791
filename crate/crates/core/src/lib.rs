//! Bi-temporal building change detection on a from-scratch tensor engine.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autograd`], [`ops`], [`gradcheck`]: dense tensors, a
//!   reverse-mode tape and a finite-difference checker.
//! * [`nn`]: parameters, low-rank deltas, AdamW and checkpoints.
//! * [`dafa`], [`msafa`], [`encoder`], [`decoder`]: the model blocks.
//! * [`model`], [`train`]: the full Siamese network and its training loop.
//! * [`data`], [`metrics`], [`config`], [`selftest`]: synthetic data,
//!   evaluation and tooling.

pub mod autograd;
pub mod config;
pub mod dafa;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod metrics;
pub mod model;
pub mod msafa;
pub mod nn;
pub mod ops;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
