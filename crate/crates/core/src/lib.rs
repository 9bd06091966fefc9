//! Bounded latent-rollout reasoning for a synthetic video question-answering task.
//!
//! A small causal decoder reads keyframe tokens and a question, reasons
//! through at most `K` continuous latent slots (each slot's input is the
//! previous slot's final hidden state), then answers. Training runs in two
//! stages: answer loss plus latent alignment to pooled thought-video
//! features, then answer loss alone.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases at
//! the crate root fix the 64-bit precision used for training.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rollout;
pub mod scalar;
pub mod supervision;
pub mod tensor;
pub mod training;

pub use error::{Result, StormError};
pub use scalar::{DType, Scalar};

/// 64-bit tensor, the training precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// 32-bit tensor, the checkpoint storage precision.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64<'p> = autodiff::Graph<'p, f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ParamSet64 = optim::ParamSet<f64>;
