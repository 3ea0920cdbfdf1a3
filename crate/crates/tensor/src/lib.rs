//! Minimal dense tensors, channels-last convolutions and a reverse-mode
//! autodiff tape, generic over `f32`/`f64`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod stns;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::{ConvGeometry, Padding};
pub use tensor::{numel, Scalar, Tensor};
