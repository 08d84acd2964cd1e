//! Dense tensors, reverse-mode autodiff and the primitive kernels the model
//! is composed from.

mod fourier;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use fourier::{dft, dft_complex, idft};
pub use gradcheck::{check_gradients, check_gradients_sampled, GradCheck};
pub use kernels::{gelu, layer_norm, matmul, multi_head_attention, softmax};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
