//! Transformer encoder classifiers.
//!
//! Two variants share one code path:
//!
//! * `custom`: token + position embedding, one post-norm transformer block,
//!   masked mean pooling and a two-layer dense head. The defaults give the
//!   parameter counts 223,616 / 10,656 / 528 / 17.
//! * `distil`: a DistilBERT-shaped encoder (768 wide, 12 heads, 3072 hidden,
//!   6 blocks, normalized embeddings) with the same pooling and head.
//!
//! Both end in a single logit and a sigmoid, so the output is P(deceptive).

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::EncodedExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Custom,
    Distil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    /// Rate for embeddings (distil only) and both residual branches.
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Rate of the two dropouts around the hidden dense layer of the head.
    pub head_dropout: f64,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn custom() -> Self {
        ModelConfig {
            variant: Variant::Custom,
            vocab_size: 6788,
            max_len: 200,
            dim: 32,
            heads: 2,
            key_dim: 32,
            ff_dim: 32,
            layers: 1,
            dropout: 0.1,
            attention_dropout: 0.0,
            head_dropout: 0.1,
            head_hidden: 16,
        }
    }

    pub fn distil() -> Self {
        ModelConfig {
            variant: Variant::Distil,
            vocab_size: 30522,
            max_len: 512,
            dim: 768,
            heads: 12,
            key_dim: 64,
            ff_dim: 3072,
            layers: 6,
            dropout: 0.1,
            attention_dropout: 0.1,
            head_dropout: 0.2,
            head_hidden: 768,
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Custom => Self::custom(),
            Variant::Distil => Self::distil(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("dim", self.dim),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("ff_dim", self.ff_dim),
            ("layers", self.layers),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config {name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary must hold the reserved tokens"));
        }
        let rates = [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("head_dropout", self.head_dropout),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(0.0..1.0).contains(v)) {
            return Err(Error::invalid(format!("model config {name}={v} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn layer_norm_eps(&self) -> f32 {
        match self.variant {
            Variant::Custom => 1e-6,
            Variant::Distil => 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Layer a parameter belongs to, for per-layer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerGroup {
    Embedding,
    Block(usize),
    HiddenDense,
    OutputDense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether weight decay applies (false for biases and norm parameters).
    pub decay: bool,
    pub group: LayerGroup,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    decay: bool,
    group: LayerGroup,
}

#[derive(Debug, Clone)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    query: Dense,
    key: Dense,
    value: Dense,
    output: Dense,
    attention_norm: Norm,
    ffn_inner: Dense,
    ffn_outer: Dense,
    ffn_norm: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    token: usize,
    position: usize,
    embedding_norm: Option<Norm>,
    blocks: Vec<BlockLayout>,
    hidden: Dense,
    output: Dense,
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool, group: LayerGroup) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            decay,
            group,
        });
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize, group: LayerGroup) -> Dense {
        Dense {
            weight: self.push(format!("{name}.weight"), vec![inputs, outputs], Init::Normal, true, group),
            bias: self.push(format!("{name}.bias"), vec![outputs], Init::Zeros, false, group),
        }
    }

    fn norm(&mut self, name: &str, width: usize, group: LayerGroup) -> Norm {
        Norm {
            gain: self.push(format!("{name}.gain"), vec![width], Init::Ones, false, group),
            bias: self.push(format!("{name}.bias"), vec![width], Init::Zeros, false, group),
        }
    }
}

/// Parameter shapes and their layout, derived from the config alone.
fn param_specs(config: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let mut b = SpecBuilder { specs: Vec::new() };
    let emb = LayerGroup::Embedding;
    let token = b.push("embedding.token".into(), vec![config.vocab_size, config.dim], Init::Normal, true, emb);
    let position = b.push("embedding.position".into(), vec![config.max_len, config.dim], Init::Normal, true, emb);
    let embedding_norm = match config.variant {
        Variant::Custom => None,
        Variant::Distil => Some(b.norm("embedding.norm", config.dim, emb)),
    };
    let inner = config.heads * config.key_dim;
    let blocks = (0..config.layers)
        .map(|i| {
            let g = LayerGroup::Block(i);
            let p = format!("block{i}");
            BlockLayout {
                query: b.dense(&format!("{p}.attention.query"), config.dim, inner, g),
                key: b.dense(&format!("{p}.attention.key"), config.dim, inner, g),
                value: b.dense(&format!("{p}.attention.value"), config.dim, inner, g),
                output: b.dense(&format!("{p}.attention.output"), inner, config.dim, g),
                attention_norm: b.norm(&format!("{p}.attention_norm"), config.dim, g),
                ffn_inner: b.dense(&format!("{p}.ffn.inner"), config.dim, config.ff_dim, g),
                ffn_outer: b.dense(&format!("{p}.ffn.outer"), config.ff_dim, config.dim, g),
                ffn_norm: b.norm(&format!("{p}.ffn_norm"), config.dim, g),
            }
        })
        .collect();
    let hidden = b.dense("head.hidden", config.dim, config.head_hidden, LayerGroup::HiddenDense);
    let output = b.dense("head.output", config.head_hidden, 1, LayerGroup::OutputDense);
    let layout = Layout {
        token,
        position,
        embedding_norm,
        blocks,
        hidden,
        output,
    };
    (b.specs, layout)
}

/// Per-layer parameter counts, in layer order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn row(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }
}

/// Captured activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// `[layer][head]`, each `[batch, len, len]` and row-stochastic.
    pub attention: Vec<Vec<Tensor>>,
    /// Summed token + position embedding, `[batch, len, dim]`.
    pub embedding_output: Tensor,
    pub embedding_gradient: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Record parameters as gradient-requiring leaves.
    pub train_params: bool,
    /// Start gradient tracking at the embedding output.
    pub track_embedding: bool,
    /// Apply dropout.
    pub training: bool,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        ForwardOptions {
            train_params: false,
            track_embedding: false,
            training: false,
        }
    }

    pub fn training() -> Self {
        ForwardOptions {
            train_params: true,
            track_embedding: false,
            training: true,
        }
    }
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    pub embedding: Var,
    pub attention: Vec<Vec<Var>>,
    /// `[batch]` logits.
    pub logits: Var,
    /// `[batch]` probabilities of the deceptive class.
    pub probabilities: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
    mode: Mode,
}

/// Initialization spread of weight matrices; samples are truncated at 2σ.
const INIT_STD: f64 = 0.02;

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = specs
            .into_iter()
            .map(|s| {
                let tensor = match s.init {
                    Init::Zeros => Tensor::zeros(s.shape),
                    Init::Ones => Tensor::full(s.shape, 1.0),
                    Init::Normal => Tensor::from_fn(s.shape, |_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * INIT_STD {
                            break x as f32;
                        }
                    }),
                };
                Param {
                    name: s.name,
                    tensor,
                    decay: s.decay,
                    group: s.group,
                }
            })
            .collect();
        Ok(Model {
            config,
            params,
            layout,
            mode: Mode::Infer,
        })
    }

    /// Assembles a model from named tensors, e.g. loaded from a checkpoint.
    /// Every tensor the config implies must be present exactly once with
    /// the expected shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(&config);
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::UnexpectedTensor(name));
            }
        }
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let tensor = by_name.remove(&s.name).ok_or_else(|| Error::MissingTensor(s.name.clone()))?;
            if tensor.shape() != s.shape {
                return Err(Error::shape("load tensor", &s.shape, tensor.shape()));
            }
            params.push(Param {
                name: s.name,
                tensor,
                decay: s.decay,
                group: s.group,
            });
        }
        if let Some(name) = by_name.into_keys().min() {
            return Err(Error::UnexpectedTensor(name));
        }
        Ok(Model {
            config,
            params,
            layout,
            mode: Mode::Infer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Counts grouped as "Token and Position Embedding", "Transformer Block"
    /// (numbered when there are several), "Dense 2" and "Dense 3".
    pub fn param_count(&self) -> ParamCount {
        let name = |g: LayerGroup| match g {
            LayerGroup::Embedding => "Token and Position Embedding".to_string(),
            LayerGroup::Block(_) if self.config.layers == 1 => "Transformer Block".to_string(),
            LayerGroup::Block(i) => format!("Transformer Block {}", i + 1),
            LayerGroup::HiddenDense => "Dense 2".to_string(),
            LayerGroup::OutputDense => "Dense 3".to_string(),
        };
        let mut rows: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let n = name(p.group);
            match rows.last_mut() {
                Some((last, count)) if *last == n => *count += p.tensor.len(),
                _ => rows.push((n, p.tensor.len())),
            }
        }
        let total = rows.iter().map(|(_, c)| c).sum();
        ParamCount { rows, total }
    }

    /// Records the forward pass of `batch` on `g`.
    ///
    /// All examples must share one padded length no larger than `max_len`.
    pub fn forward_graph<'p>(
        &'p self,
        g: &mut Graph<'p, f32>,
        batch: &[EncodedExample],
        opts: ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let len = check_batch(batch, cfg.max_len)?;
        let b = batch.len();
        let dim = cfg.dim;
        let ids: Vec<usize> = batch.iter().flat_map(|e| e.ids.iter().copied()).collect();
        let mask: Vec<bool> = batch.iter().flat_map(|e| e.mask.iter().copied()).collect();
        let training = opts.training;

        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(&p.tensor, opts.train_params))
            .collect();
        let l = &self.layout;
        let eps = cfg.layer_norm_eps();

        let tokens = g.gather(params[l.token], &ids)?;
        let tokens = g.reshape(tokens, [b, len, dim])?;
        let positions = g.narrow(params[l.position], 0, 0, len)?;
        let embedding = g.add(tokens, positions)?;
        if opts.track_embedding {
            g.track(embedding);
        }
        let mut x = embedding;
        if let Some(norm) = &l.embedding_norm {
            x = g.layer_norm(x, params[norm.gain], params[norm.bias], eps)?;
            x = g.dropout(x, cfg.dropout, training, rng)?;
        }

        let scale = 1.0 / (cfg.key_dim as f32).sqrt();
        let mut attention = Vec::with_capacity(l.blocks.len());
        for block in &l.blocks {
            let dense = |g: &mut Graph<'p, f32>, x: Var, d: &Dense| -> Result<Var> {
                let y = g.matmul(x, params[d.weight])?;
                g.add(y, params[d.bias])
            };
            let q = dense(g, x, &block.query)?;
            let k = dense(g, x, &block.key)?;
            let v = dense(g, x, &block.value)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut maps = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let start = h * cfg.key_dim;
                let qh = g.narrow(q, 2, start, cfg.key_dim)?;
                let kh = g.narrow(k, 2, start, cfg.key_dim)?;
                let vh = g.narrow(v, 2, start, cfg.key_dim)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let weights = g.masked_softmax(scores, &mask)?;
                maps.push(weights);
                let dropped = g.dropout(weights, cfg.attention_dropout, training, rng)?;
                heads.push(g.matmul(dropped, vh)?);
            }
            attention.push(maps);
            let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
            let attended = dense(g, merged, &block.output)?;
            let attended = g.dropout(attended, cfg.dropout, training, rng)?;
            let residual = g.add(x, attended)?;
            let x1 = g.layer_norm(
                residual,
                params[block.attention_norm.gain],
                params[block.attention_norm.bias],
                eps,
            )?;

            let inner = dense(g, x1, &block.ffn_inner)?;
            let inner = g.gelu(inner);
            let outer = dense(g, inner, &block.ffn_outer)?;
            let outer = g.dropout(outer, cfg.dropout, training, rng)?;
            let residual = g.add(x1, outer)?;
            x = g.layer_norm(residual, params[block.ffn_norm.gain], params[block.ffn_norm.bias], eps)?;
        }

        let pooled = g.masked_mean(x, &mask)?;
        let pooled = g.dropout(pooled, cfg.head_dropout, training, rng)?;
        let hidden = g.matmul(pooled, params[l.hidden.weight])?;
        let hidden = g.add(hidden, params[l.hidden.bias])?;
        let hidden = g.gelu(hidden);
        let hidden = g.dropout(hidden, cfg.head_dropout, training, rng)?;
        let logits = g.matmul(hidden, params[l.output.weight])?;
        let logits = g.add(logits, params[l.output.bias])?;
        let logits = g.reshape(logits, [b])?;
        let probabilities = g.sigmoid(logits);
        Ok(ForwardVars {
            params,
            embedding,
            attention,
            logits,
            probabilities,
        })
    }

    /// Runs the batch in the model's current mode and captures attention
    /// maps and the embedding output. Dropout in train mode draws from a
    /// fixed-seed generator.
    pub fn forward(&self, batch: &[EncodedExample]) -> Result<(Vec<f32>, ActivationTrace)> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            train_params: false,
            track_embedding: false,
            training: self.mode == Mode::Train,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward_graph(&mut g, batch, opts, &mut rng)?;
        let probabilities = g.value(vars.probabilities).data().to_vec();
        let trace = ActivationTrace {
            attention: vars
                .attention
                .iter()
                .map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect())
                .collect(),
            embedding_output: g.value(vars.embedding).clone(),
            embedding_gradient: None,
        };
        Ok((probabilities, trace))
    }

    /// Inference-mode probabilities, regardless of the model's mode.
    pub fn predict(&self, batch: &[EncodedExample]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward_graph(&mut g, batch, ForwardOptions::inference(), &mut rng)?;
        Ok(g.value(vars.probabilities).data().to_vec())
    }
}

fn check_batch(batch: &[EncodedExample], max_len: usize) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let len = first.ids.len();
    if len == 0 || len > max_len {
        return Err(Error::invalid(format!(
            "sequence length {len} must be between 1 and max_len {max_len}"
        )));
    }
    for e in batch {
        if e.ids.len() != len || e.mask.len() != len {
            return Err(Error::shape("batch", &[len], &[e.ids.len(), e.mask.len()]));
        }
        if !e.mask.iter().any(|&m| m) {
            return Err(Error::invalid("example without real tokens"));
        }
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD_ID;

    fn example(ids: &[usize], max_len: usize) -> EncodedExample {
        let mut padded = ids.to_vec();
        padded.resize(max_len, PAD_ID);
        EncodedExample {
            ids: padded,
            mask: (0..max_len).map(|i| i < ids.len()).collect(),
            words: ids.iter().map(|i| format!("w{i}")).collect(),
            label: None,
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            max_len: 8,
            dim: 8,
            heads: 2,
            key_dim: 4,
            ff_dim: 8,
            head_hidden: 4,
            ..ModelConfig::custom()
        }
    }

    /// Closed-form counts, written independently of `param_specs`.
    fn expected_counts(c: &ModelConfig) -> (usize, usize, usize, usize) {
        let inner = c.heads * c.key_dim;
        let mut embedding = (c.vocab_size + c.max_len) * c.dim;
        if c.variant == Variant::Distil {
            embedding += 2 * c.dim;
        }
        let attention = 3 * (c.dim * inner + inner) + inner * c.dim + c.dim;
        let ffn = c.dim * c.ff_dim + c.ff_dim + c.ff_dim * c.dim + c.dim;
        let block = attention + ffn + 4 * c.dim;
        (embedding, block, c.dim * c.head_hidden + c.head_hidden, c.head_hidden + 1)
    }

    #[test]
    fn custom_defaults_reproduce_table_counts() {
        let model = Model::build(ModelConfig::custom(), 0).unwrap();
        let counts = model.param_count();
        assert_eq!(counts.row("Token and Position Embedding"), Some(223_616));
        assert_eq!(counts.row("Transformer Block"), Some(10_656));
        assert_eq!(counts.row("Dense 2"), Some(528));
        assert_eq!(counts.row("Dense 3"), Some(17));
        assert_eq!(counts.total, 234_817);
        assert_eq!(expected_counts(model.config()), (223_616, 10_656, 528, 17));
    }

    #[test]
    fn distil_block_counts() {
        // shapes only; building the full distil model allocates ~66M floats
        let c = ModelConfig::distil();
        let (specs, _) = param_specs(&c);
        let block: usize = specs
            .iter()
            .filter(|s| s.group == LayerGroup::Block(0))
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        let attention: usize = specs
            .iter()
            .filter(|s| s.name.starts_with("block0.attention."))
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        let ffn: usize = specs
            .iter()
            .filter(|s| s.name.starts_with("block0.ffn."))
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert_eq!(attention, 2_362_368);
        assert_eq!(ffn, 4_722_432);
        assert_eq!(block, expected_counts(&c).1);
        assert_eq!(specs.iter().filter(|s| s.name.ends_with("ffn.inner.weight")).count(), 6);
    }

    #[test]
    fn counts_are_pure_functions_of_config() {
        for c in [
            small_config(),
            ModelConfig {
                layers: 3,
                heads: 3,
                key_dim: 5,
                ..small_config()
            },
            ModelConfig {
                variant: Variant::Distil,
                layers: 2,
                ..small_config()
            },
        ] {
            let m = Model::build(c.clone(), 1).unwrap();
            let counts = m.param_count();
            let (e, b, h, o) = expected_counts(&c);
            assert_eq!(counts.rows[0].1, e);
            for i in 0..c.layers {
                assert_eq!(counts.rows[1 + i].1, b);
            }
            assert_eq!(counts.row("Dense 2"), Some(h));
            assert_eq!(counts.row("Dense 3"), Some(o));
            assert_eq!(counts.total, e + c.layers * b + h + o);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(small_config(), 7).unwrap();
        let b = Model::build(small_config(), 7).unwrap();
        let c = Model::build(small_config(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let w = &a.param("head.hidden.weight").unwrap().tensor;
        assert!(w.data().iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn invalid_config_rejected() {
        for c in [
            ModelConfig { heads: 0, ..small_config() },
            ModelConfig { dropout: 1.0, ..small_config() },
            ModelConfig { attention_dropout: -0.1, ..small_config() },
        ] {
            assert!(Model::build(c, 0).is_err());
        }
    }

    #[test]
    fn inference_is_deterministic_and_row_stochastic() {
        let m = Model::build(small_config(), 3).unwrap();
        let batch = [example(&[2, 3, 4], 8), example(&[5, 6, 7, 8, 9, 10, 11, 12], 8)];
        let (p1, trace) = m.forward(&batch).unwrap();
        let (p2, _) = m.forward(&batch).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(trace.attention.len(), 1);
        assert_eq!(trace.attention[0].len(), 2);
        assert_eq!(trace.embedding_output.shape(), [2, 8, 8]);
        for head in &trace.attention[0] {
            assert_eq!(head.shape(), [2, 8, 8]);
            for row in head.data().chunks(8) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            // pad keys of the first example get no weight
            for q in 0..8 {
                for k in 3..8 {
                    assert_eq!(head.at(&[0, q, k]), 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = Model::build(small_config(), 3).unwrap();
        for name in ["head.output.weight", "head.output.bias"] {
            m.param_mut(name).unwrap().tensor.data_mut().fill(0.0);
        }
        let (p, _) = m.forward(&[example(&[2, 3], 8)]).unwrap();
        assert_eq!(p, [0.5]);
    }

    #[test]
    fn pad_ids_do_not_change_output() {
        let m = Model::build(small_config(), 4).unwrap();
        let a = example(&[2, 3, 4], 8);
        let mut b = a.clone();
        for id in &mut b.ids[3..] {
            *id = 17;
        }
        assert_eq!(m.predict(&[a]).unwrap(), m.predict(&[b]).unwrap());
    }

    #[test]
    fn out_of_range_id_rejected() {
        let m = Model::build(small_config(), 4).unwrap();
        assert!(matches!(
            m.predict(&[example(&[2, 50], 8)]),
            Err(Error::TokenOutOfRange { id: 50, size: 50 })
        ));
        assert!(m.predict(&[example(&[2; 9], 9)]).is_err());
        assert!(m.predict(&[]).is_err());
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let mut m = Model::build(ModelConfig { dropout: 0.5, ..small_config() }, 4).unwrap();
        let batch = [example(&[2, 3, 4, 5], 8)];
        let infer = m.predict(&batch).unwrap();
        m.set_mode(Mode::Train);
        let (train, _) = m.forward(&batch).unwrap();
        assert_ne!(infer, train);
    }

    #[test]
    fn from_tensors_validates() {
        let m = Model::build(small_config(), 1).unwrap();
        let tensors: Vec<(String, Tensor)> = m.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        let back = Model::from_tensors(small_config(), tensors.clone()).unwrap();
        assert_eq!(back.params(), m.params());

        let missing = tensors[1..].to_vec();
        assert!(matches!(
            Model::from_tensors(small_config(), missing),
            Err(Error::MissingTensor(n)) if n == "embedding.token"
        ));
        let mut dup = tensors.clone();
        dup.push(tensors[0].clone());
        assert!(matches!(Model::from_tensors(small_config(), dup), Err(Error::UnexpectedTensor(_))));
    }
}
