//! Minimal tensor library: reverse-mode autodiff tape, layer kernels,
//! softmax/cross-entropy and the Adam optimizer.

mod adam;
mod loss;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use loss::{argmax_rows, cross_entropy, softmax, CrossEntropy, PROB_FLOOR};
pub(crate) use loss::softmax_in_place;
pub use tape::{BnMode, BnRunningStats, Gradients, Tape, Var};
pub use tensor::{Parameter, Tensor};
