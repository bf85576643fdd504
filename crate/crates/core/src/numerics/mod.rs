//! Minimal dense-tensor numerics: row-major `f64` tensors, a reverse-mode
//! autodiff tape, and an Adam optimizer. This is the entire numeric substrate
//! for the model; everything above it composes these pieces.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Tape, TensorId, DEFAULT_LOG_FLOOR};
pub use tensor::Tensor;
