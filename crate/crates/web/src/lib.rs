//! Browser demo: trains a small classifier on a synthetic corpus inside the
//! page, then classifies statements with saliency highlights and attention
//! maps.

use veracity::corpus::{synth_corpus, SynthVocab};
use veracity::model::Variant;
use veracity::pipeline::{fit, FitOptions};
use veracity::serve::{Classifier, ClassifyRequest};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    classifier: Classifier,
    summary: serde_json::Value,
}

impl Demo {
    /// Trains the custom architecture on `n` synthetic statements.
    pub fn train(n: usize, seed: u64, epochs: usize) -> veracity::Result<Demo> {
        let synth = SynthVocab::default();
        let corpus = synth_corpus(n, &synth, seed)?;
        let mut options = FitOptions::new(Variant::Custom, seed);
        options.train.epochs = epochs;
        let mut curve = Vec::new();
        let fitted = fit(&corpus, &options, |e| {
            curve.push(serde_json::json!({"epoch": e.epoch, "loss": e.loss, "train_accuracy": e.train_accuracy, "eval_accuracy": e.eval_accuracy}))
        })?;
        let examples: Vec<&str> = corpus.statements.iter().take(6).map(|s| s.text.as_str()).collect();
        let summary = serde_json::json!({
            "train_size": fitted.train_size,
            "test_size": fitted.test_size,
            "parameters": fitted.checkpoint.model.param_count().total,
            "vocab_size": fitted.checkpoint.vocab.len(),
            "report": fitted.report,
            "epochs": curve,
            "truthful_signals": synth.truthful_signals,
            "deceptive_signals": synth.deceptive_signals,
            "examples": examples,
        });
        Ok(Demo {
            classifier: Classifier::new(fitted.checkpoint),
            summary,
        })
    }

    pub fn explain(&self, text: &str, top_k: usize) -> veracity::Result<serde_json::Value> {
        let response = self.classifier.classify(&ClassifyRequest {
            text: text.to_string(),
            top_k,
            include_attention: true,
        })?;
        Ok(serde_json::to_value(response).expect("response serializes"))
    }

    pub fn summary_json(&self) -> &serde_json::Value {
        &self.summary
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u32, epochs: usize) -> Result<Demo, JsError> {
        Demo::train(n, seed.into(), epochs).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Held-out metrics, training curve and the planted signal words, as JSON.
    pub fn summary(&self) -> String {
        self.summary.to_string()
    }

    /// Classification, per-word saliency and attention maps, as JSON.
    pub fn classify(&self, text: &str, top_k: usize) -> Result<String, JsError> {
        self.explain(text, top_k)
            .map(|v| v.to_string())
            .map_err(|e| JsError::new(&e.to_string()))
    }
}
