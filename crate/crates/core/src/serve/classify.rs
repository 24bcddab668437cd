//! Request/response types and the classification pipeline behind the
//! service.

use serde::{Deserialize, Serialize};

use crate::corpus::{clean_transcript, CleaningRules};
use crate::error::{Error, Result};
use crate::explain::{attention_maps, saliency_with_trace, top_k, AttentionRecord};
use crate::metrics::MetricsReport;
use crate::model::{Model, Variant};
use crate::serve::checkpoint::Checkpoint;
use crate::tokenizer::{encode, Vocabulary};

pub const DEFAULT_TOP_K: usize = 5;

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub text: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub include_attention: bool,
}

impl ClassifyRequest {
    pub fn new(text: impl Into<String>) -> Self {
        ClassifyRequest {
            text: text.into(),
            top_k: DEFAULT_TOP_K,
            include_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSaliency {
    pub word: String,
    pub saliency: f64,
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    /// `"truthful"` or `"deceptive"`.
    pub label: String,
    /// Probability of the deceptive class.
    pub probability: f64,
    pub tokens: Vec<TokenSaliency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionRecord>,
    /// Config digest of the model that produced the response.
    pub model_info: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub digest: String,
    pub variant: Variant,
    pub parameters: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub evaluation: Option<MetricsReport>,
}

/// A frozen model plus everything needed to turn raw text into a response.
#[derive(Debug)]
pub struct Classifier {
    model: Model,
    vocab: Vocabulary,
    cleaning: CleaningRules,
    info: ModelInfo,
}

impl Classifier {
    pub fn new(checkpoint: Checkpoint) -> Self {
        let digest = checkpoint.config_digest();
        let Checkpoint {
            mut model,
            vocab,
            cleaning,
            evaluation,
        } = checkpoint;
        model.set_mode(crate::model::Mode::Infer);
        let config = model.config();
        let info = ModelInfo {
            digest,
            variant: config.variant,
            parameters: model.param_count().total,
            vocab_size: config.vocab_size,
            max_len: config.max_len,
            evaluation,
        };
        Classifier {
            model,
            vocab,
            cleaning,
            info,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    /// Clean, encode, forward, saliency, top-k. Invalid requests return
    /// [`Error::InvalidArgument`] or [`Error::DegenerateInput`].
    pub fn classify(&self, request: &ClassifyRequest) -> Result<ClassifyResponse> {
        if request.top_k < 1 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if request.text.trim().is_empty() {
            return Err(Error::invalid("text must not be empty"));
        }
        let cleaned = clean_transcript(&request.text, &self.cleaning)?;
        let example = encode(&cleaned, &self.vocab, self.model.config().max_len)?;
        let (map, trace) = saliency_with_trace(&self.model, &example)?;
        let mut highlighted = vec![false; map.word_scores.len()];
        for t in top_k(&map, request.top_k) {
            highlighted[t.position] = true;
        }
        let tokens = map
            .word_scores
            .iter()
            .zip(highlighted)
            .map(|(w, highlighted)| TokenSaliency {
                word: w.word.clone(),
                saliency: w.score,
                highlighted,
            })
            .collect();
        let attention = if request.include_attention {
            Some(attention_maps(&trace, 0, &example.mask)?)
        } else {
            None
        };
        Ok(ClassifyResponse {
            label: map.predicted_label.name().to_string(),
            probability: map.deceptive_probability,
            tokens,
            attention,
            model_info: self.info.digest.clone(),
        })
    }
}

/// Whether an error was caused by the request rather than the service.
pub fn is_client_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidArgument(_) | Error::DegenerateInput | Error::TokenOutOfRange { .. }
    )
}
