//! Projected compression of GPT-style decoders.
//!
//! A base model's weight matrices stay frozen while trainable projections
//! `P1`, `P2` (and a residual `W_r`) produce compressed weights
//! `W_C = P1·W·P2 + W_r`. The crate also ships the hard-pruning baseline,
//! the training loop used to compare the two, and an analytic FLOPs model.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod importance;
pub mod model;
pub mod plan;
pub mod projection;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;
