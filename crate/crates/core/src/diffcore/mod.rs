//! Minimal differentiable core: tensors, the operators the networks use,
//! a reverse-mode tape, and an Adam optimizer.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use ops::{Activation, BnMode, Padding};
pub use optim::{Adam, AdamConfig};
pub use params::{BatchNormState, Param, ParamId, ParamStore, BN_EPSILON, BN_MOMENTUM};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
