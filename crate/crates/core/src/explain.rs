//! Gradient saliency and attention maps.
//!
//! Saliency follows two steps: the forward pass starts gradient tracking at
//! the summed token + position embedding, then the probability of the
//! predicted class is backpropagated to it. Each token's raw score is the L1
//! norm of its embedding gradient; scores over real tokens are divided by
//! their total so they sum to one.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, ForwardOptions, Model};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::EncodedExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// One entry per real token, in input order.
    pub word_scores: Vec<WordScore>,
    pub predicted_label: Label,
    /// Probability of `predicted_label`.
    pub predicted_probability: f64,
    /// Probability of the deceptive class.
    pub deceptive_probability: f64,
    /// Set when every raw score was zero and a uniform map was returned.
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn scores(&self) -> Vec<f64> {
        self.word_scores.iter().map(|w| w.score).collect()
    }
}

/// Per-token L1 norms of a `[len, dim]` gradient over the masked-in
/// positions, normalized to sum to one. Returns the scores and whether the
/// uniform fallback was used.
pub fn normalized_token_scores(gradient: &[f32], dim: usize, mask: &[bool]) -> Result<(Vec<f64>, bool)> {
    if gradient.len() != dim * mask.len() {
        return Err(Error::shape("saliency", &[gradient.len()], &[mask.len(), dim]));
    }
    let raw: Vec<f64> = gradient
        .chunks(dim)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(row, _)| row.iter().map(|g| (*g as f64).abs()).sum())
        .collect();
    if raw.is_empty() {
        return Err(Error::invalid("no real tokens to explain"));
    }
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok((raw.iter().map(|r| r / total).collect(), false))
    } else {
        let uniform = 1.0 / raw.len() as f64;
        Ok((vec![uniform; raw.len()], true))
    }
}

/// Saliency of one example plus the activations of the same forward pass,
/// with the embedding gradient filled in. Dropout is always off.
pub fn saliency_with_trace(model: &Model, example: &EncodedExample) -> Result<(SaliencyMap, ActivationTrace)> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        train_params: false,
        track_embedding: true,
        training: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = std::slice::from_ref(example);
    let vars = model.forward_graph(&mut g, batch, opts, &mut rng)?;
    let p = g.value(vars.probabilities).data()[0];
    let predicted = if p >= 0.5 { Label::Deceptive } else { Label::Truthful };
    let target = match predicted {
        Label::Deceptive => vars.probabilities,
        Label::Truthful => g.affine(vars.probabilities, -1.0, 1.0),
    };
    g.backward(target)?;
    let gradient = g
        .grad(vars.embedding)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(g.shape(vars.embedding).to_vec()));
    let (scores, degenerate) = normalized_token_scores(gradient.data(), model.config().dim, &example.mask)?;
    let word_scores = example
        .words
        .iter()
        .zip(scores)
        .map(|(w, score)| WordScore {
            word: w.clone(),
            score,
        })
        .collect();
    let p = p as f64;
    let map = SaliencyMap {
        word_scores,
        predicted_label: predicted,
        predicted_probability: if predicted == Label::Deceptive { p } else { 1.0 - p },
        deceptive_probability: p,
        degenerate,
    };
    let trace = ActivationTrace {
        attention: vars
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect())
            .collect(),
        embedding_output: g.value(vars.embedding).clone(),
        embedding_gradient: Some(gradient),
    };
    Ok((map, trace))
}

pub fn saliency(model: &Model, example: &EncodedExample) -> Result<SaliencyMap> {
    saliency_with_trace(model, example).map(|(m, _)| m)
}

/// Sums the scores of fragments that belong to the same word.
/// `word_index[i]` is the word of fragment `i`; indices must be
/// non-decreasing. Fragment texts are concatenated.
pub fn merge_fragments(fragments: &[WordScore], word_index: &[usize]) -> Result<Vec<WordScore>> {
    if fragments.len() != word_index.len() {
        return Err(Error::shape("merge_fragments", &[fragments.len()], &[word_index.len()]));
    }
    if word_index.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("fragment word indices must be non-decreasing"));
    }
    let mut merged: Vec<WordScore> = Vec::new();
    let mut last = None;
    for (f, &w) in fragments.iter().zip(word_index) {
        match merged.last_mut() {
            Some(m) if last == Some(w) => {
                m.word.push_str(f.word.trim_start_matches("##"));
                m.score += f.score;
            }
            _ => merged.push(f.clone()),
        }
        last = Some(w);
    }
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub position: usize,
    pub word: String,
    pub score: f64,
}

/// The `k` highest-scoring tokens, by descending score then position.
pub fn top_k(map: &SaliencyMap, k: usize) -> Vec<RankedToken> {
    let mut ranked: Vec<RankedToken> = map
        .word_scores
        .iter()
        .enumerate()
        .map(|(position, w)| RankedToken {
            position,
            word: w.word.clone(),
            score: w.score,
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.position.cmp(&b.position)));
    ranked.truncate(k);
    ranked
}

/// Attention restricted to the real tokens of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// `[layer][head][query][key]`.
    pub layers: Vec<Vec<Vec<Vec<f32>>>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }
}

/// Drops pad rows and columns of example `index` in `trace` and
/// renormalizes each remaining row.
pub fn attention_maps(trace: &ActivationTrace, index: usize, mask: &[bool]) -> Result<AttentionRecord> {
    let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if keep.is_empty() {
        return Err(Error::invalid("attention map of an example without real tokens"));
    }
    let len = mask.len();
    let layers = trace
        .attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|t| {
                    if t.rank() != 3 || t.shape()[1] != len || t.shape()[2] != len || index >= t.shape()[0] {
                        return Err(Error::shape("attention_maps", t.shape(), &[index, len, len]));
                    }
                    let base = index * len * len;
                    Ok(keep
                        .iter()
                        .map(|&q| {
                            let row: Vec<f64> = keep.iter().map(|&k| t.data()[base + q * len + k] as f64).collect();
                            let total: f64 = row.iter().sum();
                            row.iter()
                                .map(|&x| {
                                    if total > 0.0 {
                                        (x / total) as f32
                                    } else {
                                        (1.0 / keep.len() as f64) as f32
                                    }
                                })
                                .collect()
                        })
                        .collect())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionRecord { layers })
}

/// The example's words separated by spaces, with the top-`k` salient words
/// wrapped in `<mark data-score="…">`. Words are HTML-escaped.
pub fn render_highlight(example: &EncodedExample, map: &SaliencyMap, k: usize) -> String {
    let highlighted: std::collections::HashMap<usize, f64> =
        top_k(map, k).into_iter().map(|t| (t.position, t.score)).collect();
    let mut out = String::new();
    for (i, word) in example.words.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let word = escape_html(word);
        match highlighted.get(&i) {
            Some(score) => {
                let _ = write!(out, "<mark data-score=\"{score:.4}\">{word}</mark>");
            }
            None => out.push_str(&word),
        }
    }
    out
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}
