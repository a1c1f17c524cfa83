//! Teacher–student distillation of toy decoder-only language models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: flat `f64` tensors with reverse-mode automatic
//!   differentiation on a per-step tape, plus a finite-difference oracle.
//! - [`model`]: a small pre-norm transformer (RMS norm, causal attention,
//!   gated feed-forward, learned positions) built on the tensor ops.
//! - [`data`]: weighted context-free grammars, synthetic corpora, batching,
//!   and agreement minimal pairs.
//! - [`distill`]: logit mixing, the progressive blend schedule, and the
//!   forward/reverse KL distillation losses (optionally chunked over time).
//! - [`trainer`]: AdamW with cosine annealing, the training loops, and the
//!   binary checkpoint format.
//! - [`eval`]: sequence log-probabilities, perplexity, minimal-pair accuracy,
//!   mode-mass diagnostics, and exact small-vocabulary sequence KL.
//!
//! Everything is deterministic: a fixed seed reproduces every artifact
//! byte for byte, with or without the `parallel` feature.

#![forbid(unsafe_code)]

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub(crate) mod parallel;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
