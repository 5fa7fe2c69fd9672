//! Minimal dense tensor engine: tensors, layer kernels, a reverse-mode
//! autodiff tape, SGD with momentum, finite-difference gradient checking and
//! the `VXM1` checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod layer;
pub mod ops;
mod optim;
mod tensor;

pub use graph::{Fault, Gradients, Graph, NodeId, OpKind};
pub use layer::LayerSpec;
pub use ops::{ConvGeom, PoolMode};
pub use optim::SgdmState;
pub use tensor::Tensor;
