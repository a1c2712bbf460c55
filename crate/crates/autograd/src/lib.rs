//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors,
//! with the layer kernels needed by convolutional denoisers.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
