//! Dense tensors, reverse-mode differentiation, AdamW, and the
//! finite-difference oracle used to certify every gradient.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_input_gradient, check_param_gradients, finite_difference_gradient, relative_error};
pub use graph::{Gradients, Graph, OpKind, Var, LAYER_NORM_EPS, PROB_EPS};
pub use optim::{clip_grad_norm, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
