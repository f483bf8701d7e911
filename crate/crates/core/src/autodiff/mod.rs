//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! Operations are recorded on a [`Tape`] as they execute. Each node stores
//! its value and a closure mapping the output gradient to gradients of its
//! parents; [`Tape::backward`] walks the nodes in reverse creation order.
//!
//! ```
//! use krrst_core::autodiff::Tape;
//! use krrst_core::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.sum_sq().unwrap().scale(0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[1.0, 2.0, 3.0]);
//! ```

mod nn;
mod ops;
mod tape;

pub use nn::BatchStats;
pub use ops::{log_softmax_rows, softmax_rows};
pub use tape::{BackwardFn, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
