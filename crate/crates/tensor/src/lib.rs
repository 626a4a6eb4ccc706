//! Reverse-mode automatic differentiation over dense 5D tensors.
//!
//! The engine is deliberately narrow: it covers the operations needed by
//! volumetric encoder/decoder networks (3D convolution, instance
//! normalization, channel concatenation, nearest upsampling, gating) and
//! nothing else. Every kernel is generic over [`Scalar`] so the same network
//! code runs in `f32` for training and in `f64` for finite-difference checks.
//!
//! A forward pass records nodes on a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and returns [`Gradients`] keyed by both node and
//! parameter.

mod conv;
mod direct;
mod graph;
mod param;
mod scalar;
mod tensor;

pub use conv::ConvGeometry;
pub use graph::{Graph, Gradients, Var};
pub use param::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
