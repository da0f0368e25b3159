//! Supermask training for randomly weighted, weight-tied Transformers.

pub mod autograd;
pub mod datapipe;
pub mod error;
pub mod kernels;
pub mod persist;
pub mod supermask;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autograd::{Elementwise, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
