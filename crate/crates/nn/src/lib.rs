//! A small reverse-mode tensor engine: tape-based autodiff, a layer kit
//! (dense, 1-D/2-D convolution, GRU, multi-head attention, layer norm,
//! embeddings), an adaptive-moment optimizer and a finite-difference checker.

pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod store;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_params, layer_suite};
pub use graph::{Backward, Graph, Var};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use store::{under_prefix, Gradients, ParameterStore};
pub use tensor::{Real, Tensor};
