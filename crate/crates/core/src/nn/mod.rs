//! Minimal CPU neural-network engine: NCHW tensors, a named parameter
//! store, and the layers the U-net++ needs, each with an explicit backward.

pub mod layers;
pub mod params;
pub mod tensor;

pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
