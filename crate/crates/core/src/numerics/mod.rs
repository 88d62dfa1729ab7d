//! Dense tensors, reverse-mode gradients, fully connected networks and Adam.

mod graph;
pub mod kernels;
mod mlp;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Activation;
pub use mlp::{Layer, MlpParams, ParamHandles};
pub use optim::{adam_step, AdamConfig, AdamState, Parameters};
pub use tensor::Tensor;
