//! Dense reverse-mode autodiff: tensors, a dynamically recorded tape, Adam
//! and the `WMCK` parameter checkpoint format.

mod adam;
pub mod checkpoint;
mod linalg;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
