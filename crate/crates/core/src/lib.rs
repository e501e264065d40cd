//! Attention-head lenses.
//!
//! A lens is a `d_model × |V|` matrix trained so that, applied to a single
//! attention head's contribution to the residual stream, its softmax matches
//! the model's final next-token distribution under KL divergence. This crate
//! carries everything needed to do that at desk scale:
//!
//! - [`model`]: a small pre-layernorm GPT-2-style decoder with per-head
//!   capture, pretraining, and a bit-exact file format;
//! - [`corpus`]: byte-level tokenizer, corpus splits and seeded batching;
//! - [`lens`]: the lens type, KL objective and unembedding baseline;
//! - [`trainer`]: Adam-based lens training, checkpoints and gradient checks;
//! - [`analysis`]: top-k readouts, prompt scans, transfer divergence and
//!   lens-vs-baseline evaluation.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod lens;
pub mod model;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
