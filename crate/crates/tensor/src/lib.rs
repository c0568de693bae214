//! Dense f32 tensors with reverse-mode automatic differentiation, a seedable
//! random stream, and the TFF tensor file format.

mod error;
pub mod gradcheck;
pub mod ops;
mod prng;
mod tensor;
pub mod tff;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_at, finite_diff_grad, relative_error};
pub use ops::conv::{avg_pool2x2, conv2d};
pub use ops::elementwise::{BinaryOp, UnaryOp};
pub use ops::linalg::{inverse, log_abs_det, matmul, Lu};
pub use ops::loss::softmax_cross_entropy;
pub use prng::Prng;
pub use tensor::Tensor;
