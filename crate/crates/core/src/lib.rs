//! Simulator for federated layer-wise self-supervised training with depth
//! dropout and per-client resource accounting.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod resources;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use autodiff::{FlopCount, Gradients, ParamId, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
