//! Differentiable building blocks: tensors, the gradient tape, layers,
//! Gaussian heads, Adam and the checkpoint container.

pub mod checkpoint;
pub mod gaussian;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gaussian::{gaussian_log_density, kl_diag_gaussians, kl_rows, log_density_rows, reparam_sample, reparam_var, GaussianParams, VAR_FLOOR};
pub use graph::{Activation, Gradients, Graph, Var};
pub use nn::{gaussian_head, lstm_step, mlp_forward, GaussianHead, GaussianVars, Linear, LstmCell, LstmVars, Mlp, RecurrentState};
pub use optim::{Adam, GRAD_CLIP_NORM};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tensor::{matmul, DType, Real, Tensor, Trans};
