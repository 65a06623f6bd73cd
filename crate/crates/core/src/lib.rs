//! Pruning-aware tuning for a small Llama-style decoder.
//!
//! A single trainable channel mask is shared by every hybrid sparsification
//! module in the network. After training, LoRA adapters and sparsifiers are
//! folded into the base weights and the hidden dimension is physically
//! sliced, producing a smaller dense model with matching outputs.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod lora;
pub mod model;
pub mod pruner;
pub mod sparsify;
pub mod trainer;

pub use autodiff::{DType, Float, Tape, Tensor, Var};
pub use error::{Error, Result, TensorError};
