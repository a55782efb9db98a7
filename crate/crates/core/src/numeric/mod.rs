//! Dense linear algebra, activations and the finite-difference harness.

pub mod gradcheck;
mod matrix;
pub mod ops;
mod real;

pub use gradcheck::{gradient_check, GradCheckReport, DEFAULT_STEP, GRADCHECK_TOLERANCE};
pub use matrix::Matrix;
pub use ops::{layer_norm, linear_forward, softmax_rows, LayerNorm, Linear};
pub use real::Real;
