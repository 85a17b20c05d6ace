//! Desk-scale laboratory for prompt KV-cache eviction in decoder-only
//! transformers.
//!
//! The crate bundles a small tensor/autodiff stack, a toy transformer with
//! grouped-query attention and rotary positions, trainable lookahead
//! importance predictors (soft tokens plus selectively-activated low-rank
//! adapters), five baseline eviction policies, the KL training loop, an
//! analytical prefill cost model, and an evaluation harness with synthetic
//! long-context corpora.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `lkv` binary for the subcommand interface.

pub mod error;
pub mod model;
pub mod scoring;
pub mod training;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
