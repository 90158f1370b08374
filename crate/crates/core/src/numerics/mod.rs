//! Dense tensors, reverse-mode differentiation, and the AdamW optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::RngKey;
pub use tensor::Tensor;
