//! Minimal reverse-mode differentiation over dense f64 tensors.
//!
//! Gradients can be taken with respect to model parameters and input-space
//! leaves alike (masks, patterns, images). A tape and its tensors are confined
//! to one thread; independent tapes may run in parallel.

mod tape;
mod tensor;

pub use tape::{evaluate_with_gradients, finite_difference_gradient, GradTape, Gradients, NodeId};
pub use tensor::{Tensor, DENOM_FLOOR, LOG_FLOOR};
