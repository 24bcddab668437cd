//! Truthful/deceptive statement classification with explanations.
//!
//! The crate covers the whole pipeline: transcript cleaning and corpus
//! handling, a word-level tokenizer, a small reverse-mode autodiff engine,
//! two transformer encoder variants, AdamW training with gradient
//! accumulation, evaluation metrics, gradient saliency and attention maps,
//! and a binary checkpoint format plus an HTTP service.

pub mod corpus;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod serve;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
