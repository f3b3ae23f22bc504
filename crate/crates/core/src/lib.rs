//! Core library: dense tensor kernels with hand-written gradients, the
//! gated cross-attention fusion block built from them, closed-form cost
//! accounting, dataset labeling utilities, and detection metrics.

pub mod cage;
pub mod cost;
pub mod error;
pub mod eval;
pub mod label;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
