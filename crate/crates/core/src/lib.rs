//! Core library for gesture-conditioned speech synthesis experiments:
//! a small f64 tensor/autodiff stack, sparse and hierarchical
//! Mixture-of-Experts layers, a multimodal style-fusion pipeline, a toy
//! autoregressive acoustic decoder, gesture-speech alignment metrics, and
//! synthetic corpus tooling for end-to-end verification.

pub mod alignment;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{CoreError, Result};
pub use nn::{Adam, AttentionBlock, FeedForward, LayerNorm, LinearLayer, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{concat_cols, concat_rows, grad_check, Gradients, Tape, Var};
pub use tensor::DTensor;
