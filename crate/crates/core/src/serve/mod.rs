//! Checkpoints, the classification pipeline and the HTTP service.

pub mod checkpoint;
pub mod classify;
#[cfg(feature = "http")]
pub mod http;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classify::{ClassifyRequest, ClassifyResponse, Classifier, ModelInfo, TokenSaliency};
