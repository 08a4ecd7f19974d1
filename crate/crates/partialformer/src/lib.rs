//! Encoder-decoder transformers with head-level feed-forward networks.
//!
//! The crate implements two sequence-to-sequence architectures end to end —
//! a standard pre-norm transformer and a variant whose per-head outputs pass
//! through a shared small feed-forward network gated per head, with optional
//! head-count expansion and embedding-level attention logits shared across
//! layers — plus the tooling around them:
//!
//! - exact parameter and multiply-accumulate accounting ([`analysis`]),
//! - behavioral metrics (head output diversity, token uniformity, FFN
//!   activation rates),
//! - a toy trainer with label smoothing, warmup/inverse-sqrt scheduling,
//!   checkpoint averaging, and beam-search decoding ([`training`]),
//! - a thin CLI binary (`partialformer`) over the [`cli`] module.
//!
//! Start with the runnable examples (`cargo run --example <name>`); each one
//! demonstrates a single capability against desk-scale configurations.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod model;
pub mod pgffn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Activation, Tensor};
