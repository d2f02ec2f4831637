//! Unsupervised graph-neural-network power allocation for energy-efficient
//! downlink cell-free massive MIMO.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`.

pub mod baselines;
pub mod config;
pub mod error;
pub mod gnn;
pub mod objective;
pub mod runtime;
pub mod scalar;
pub mod scenario;
pub mod sinrnet;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type PolicyParams = gnn::PolicyParams<f64>;
pub type TrainState = training::TrainState<f64>;
pub type EeParams = objective::EeParams<f64>;
