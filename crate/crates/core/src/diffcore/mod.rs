//! Dense tensors, forward kernels, and reverse-mode gradients restricted to a
//! declared set of trainable parameters.

pub mod gradcheck;
pub mod kernel;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use kernel::{
    affine_modulate, argmax_rows, avg_pool, batch_norm, conv2d, cross_entropy_loss, entropy_loss, flatten, linear,
    relu, row_entropies, softmax_probs, BatchNormState, NormMode, NormStats, NORM_EPS, PROB_FLOOR,
};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
