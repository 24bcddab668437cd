//! Corpus to checkpoint in one call: clean, split, build the vocabulary,
//! encode, train and evaluate on the held-out part.

use crate::corpus::{clean_transcript, split, CleaningRules, Corpus};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig, Variant};
use crate::serve::Checkpoint;
use crate::tokenizer::{build_vocab, encode_corpus, fit_length, EncodedExample, Vocabulary};
use crate::train::{predict_all, train, EpochStats, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Architecture; `vocab_size` is the vocabulary cap and is replaced by
    /// the size of the vocabulary actually built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cleaning: CleaningRules,
    pub train_fraction: f64,
    pub min_freq: usize,
    /// Seed of the split and of the parameter initialization.
    pub seed: u64,
}

impl FitOptions {
    pub fn new(variant: Variant, seed: u64) -> Self {
        FitOptions {
            model: ModelConfig::for_variant(variant),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            cleaning: CleaningRules::default(),
            train_fraction: 0.7,
            min_freq: 1,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fitted {
    /// Trained model with the held-out report attached.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub report: MetricsReport,
    pub train_size: usize,
    pub test_size: usize,
}

/// Cleans every statement. A statement left empty is an error naming its id.
pub fn clean_corpus(corpus: &Corpus, rules: &CleaningRules) -> Result<Corpus> {
    let mut out = corpus.clone();
    for s in &mut out.statements {
        s.text = clean_transcript(&s.text, rules).map_err(|e| match e {
            Error::DegenerateInput => Error::invalid(format!("statement {} is empty after cleaning", s.id)),
            other => other,
        })?;
    }
    Ok(out)
}

/// Encodes an already cleaned corpus, padded to its longest statement.
pub fn encode_cleaned(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedExample>> {
    encode_corpus(corpus, vocab, fit_length(corpus, max_len))
}

/// Scores labelled examples and summarizes them.
pub fn evaluate(model: &Model, examples: &[EncodedExample]) -> Result<MetricsReport> {
    let scores: Vec<f64> = predict_all(model, examples)?.into_iter().map(f64::from).collect();
    let labels: Vec<bool> = examples
        .iter()
        .map(|e| e.label.map(|l| l.is_deceptive()).ok_or_else(|| Error::invalid("evaluation example without a label")))
        .collect::<Result<_>>()?;
    MetricsReport::evaluate(&scores, &labels)
}

pub fn fit(corpus: &Corpus, options: &FitOptions, on_epoch: impl FnMut(&EpochStats)) -> Result<Fitted> {
    let cleaned = clean_corpus(corpus, &options.cleaning)?;
    let (train_corpus, test_corpus) = split(&cleaned, options.train_fraction, options.seed)?;
    let vocab = build_vocab(&train_corpus, options.model.vocab_size, options.min_freq)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..options.model.clone()
    };
    let len = fit_length(&cleaned, config.max_len);
    let train_set = encode_corpus(&train_corpus, &vocab, len)?;
    let test_set = encode_corpus(&test_corpus, &vocab, len)?;
    let mut model = Model::build(config, options.seed)?;
    let history = train(&mut model, &train_set, &test_set, &options.train, on_epoch)?;
    let report = evaluate(&model, &test_set)?;
    let mut checkpoint = Checkpoint::new(model, vocab);
    checkpoint.cleaning = options.cleaning.clone();
    checkpoint.evaluation = Some(report.clone());
    Ok(Fitted {
        checkpoint,
        history,
        report,
        train_size: train_set.len(),
        test_size: test_set.len(),
    })
}
