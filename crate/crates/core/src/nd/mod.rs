//! Dense tensors, the gradient tape, keyed random streams and the
//! finite-difference oracle.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{elementwise_relative_error, finite_diff_grad, relative_error};
pub use rng::{rng_normal, rng_uniform, slots, StreamKey};
pub use tape::{GradTape, Gradients, Reduction, Var};
pub use tensor::{
    argmax_rows, conv2d, conv2d_backward, cross_entropy_per_example, log_softmax_rows, softmax_cross_entropy,
    softmax_rows, ConvGeometry, DType, Real, Tensor,
};
