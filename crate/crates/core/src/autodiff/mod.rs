//! Dense reverse-mode differentiation and the network primitives built on it.

mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{value_and_grad, Binding, Graph, Var};
pub use optim::{adam_step, clip_grad_norm, Adam};
pub use params::ParamStore;
pub use tensor::Tensor;
