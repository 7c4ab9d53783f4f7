//! Dense `f64` numerics with reverse-mode differentiation.

pub mod kernels;
mod tape;

pub use tape::{FlopCategory, FlopCounts, Gradients, Tape, Var};
