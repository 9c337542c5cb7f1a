//! Dense numerics with hand-written backward passes.

mod gradcheck;
pub mod ops;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at};
pub use ops::{
    cross_entropy, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward,
    softmax_rows, softmax_rows_backward, LayerNormCache, LAYER_NORM_EPS,
};
pub use tensor::Tensor;
