//! Tensors, reverse-mode autodiff, random numbers and gradient checking.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, max_relative_error, numerical_gradient, tape_fn};
pub use rng::{sample_normal, sample_uniform, Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, sigmoid, softplus, Tensor};
