//! Minimal CPU autodiff engine and layer library used by the translation
//! and segmentation networks.

pub mod checkpoint;
mod float;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use float::Float;
pub use graph::{Graph, NodeId};
pub use layers::{BatchNorm, Bound, Conv2d, Init, InstanceNorm, Linear, Mode, ParamId, ParamSet};
pub use optim::{Adam, Sgd};
pub use tensor::Tensor;
