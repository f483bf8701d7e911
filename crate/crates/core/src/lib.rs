//! Self-supervised dataset distillation with kernel ridge regression.
//!
//! The crate contains a small reverse-mode autodiff engine over dense
//! tensors, the ConvNet/MLP models built on it, Barlow Twins target
//! training, the kernel-ridge-regression outer loss and its meta-gradient,
//! the distillation loop with its model pool, the downstream evaluation
//! protocols, and an exact analysis of the bias of mini-batch
//! meta-gradients for bilevel objectives.

pub mod autodiff;
pub mod bias;
pub mod bundle;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod krr;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{DType, Real, Tensor};
