//! Dense f64 tensors, reverse-mode autograd and the training primitives
//! built on them.

pub(crate) mod conv;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, rel_error, ParamCheck, REL_FLOOR};
pub use graph::{Graph, Var, MASK_NEG};
pub use init::{xavier_uniform, Init};
pub use layers::{Conv, Linear};
pub use lstm::{lstm_cell, LstmCell};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    graph::sigmoid(x)
}
