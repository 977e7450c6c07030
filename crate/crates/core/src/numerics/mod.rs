//! Dense linear algebra, neural primitives, and the finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod ops;

pub use gradcheck::{check_gradient, finite_diff_grad, relative_error, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{
    dot, layer_norm, layer_norm_backward, layer_norm_cached, log_softmax, norm_sq, sigmoid,
    softmax, softmax_backward, LayerNormCache, LN_EPS,
};

/// Finite-difference step used by every gradient check in the crate.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Maximum relative error accepted by gradient checks.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
