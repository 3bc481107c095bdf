//! Parameter-efficient contrastive fine-tuning of a small bimodal text/code
//! encoder, with retrieval evaluation and a code-search index.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f64` instantiation used for training and verification.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod grad_check;
pub mod graph;
pub mod index;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod ops;
pub mod peft;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Parameter = tensor::Parameter<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
