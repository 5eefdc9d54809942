//! Tensor storage, differentiable ops, and optimization.

pub mod conv;
pub mod data;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod upsample;
pub mod warp;

pub use conv::ConvSpec;
pub use data::{Shape, TensorData};
pub use params::{bias_init, conv_init, Adam, GraphBinds, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, TensorId};
