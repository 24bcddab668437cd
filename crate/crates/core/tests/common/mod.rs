#![allow(dead_code)]

pub mod client;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use veracity::corpus::Label;
use veracity::model::{Model, ModelConfig};
use veracity::tensor::{Graph, Scalar, Tensor, Var};
use veracity::tokenizer::EncodedExample;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-scale..scale)))
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub struct ProbeReport {
    pub probes: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl ProbeReport {
    pub fn new() -> Self {
        ProbeReport {
            probes: 0,
            worst: 0.0,
            worst_at: String::new(),
        }
    }

    pub fn record(&mut self, error: f64, label: impl FnOnce() -> String) {
        self.probes += 1;
        if error > self.worst || error.is_nan() {
            self.worst = error;
            self.worst_at = label();
        }
    }

    pub fn merge(&mut self, other: ProbeReport) {
        self.probes += other.probes;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }
}

/// Compares the graph gradient of `sum(w * f(inputs))` for a fixed random
/// `w` against central differences with step `step * scale` on
/// `probes_per_input` random coordinates of every input.
///
/// `build` runs at precision `T` for the analytic gradient; `oracle` must be
/// the same computation in f64 and is only ever evaluated forward.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<T: Scalar>(
    name: &str,
    inputs: &[Tensor<T>],
    build: &dyn Fn(&mut Graph<'_, T>, &[Var]) -> Var,
    oracle: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
    step: f64,
    scale: f64,
    probes_per_input: usize,
    floor: f64,
    seed: u64,
) -> ProbeReport {
    let mut r = rng(seed);
    let eval = |inputs: &[Tensor<f64>]| -> Vec<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = oracle(&mut g, &vars);
        g.value(out).data().to_vec()
    };
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let out_len = eval(&wide).len();
    let weights: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();

    // analytic side
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::new(shape, weights.iter().map(|&x| T::lit(x)).collect()).unwrap());
    let weighted = g.mul(out, w).unwrap();
    let flat = g.reshape(weighted, [out_len]).unwrap();
    let total = g.sum_axis(flat, 0).unwrap();
    g.backward(total).unwrap();

    let project = |values: Vec<f64>| -> f64 { values.iter().zip(&weights).map(|(v, w)| v * w).sum() };
    let h = step * scale;
    let mut report = ProbeReport::new();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for _ in 0..probes_per_input {
            let j = r.random_range(0..input.len());
            let base = wide[which].data()[j];
            let at = |x: f64| {
                let mut shifted = wide.clone();
                shifted[which].data_mut()[j] = x;
                project(eval(&shifted))
            };
            let numeric = richardson(|h| (at(base + h) - at(base - h)) / (2.0 * h), h);
            let a = analytic.data()[j].to_f64().unwrap();
            report.record(relative_error(a, numeric, floor), || {
                format!("{name} input {which} index {j}: analytic {a:e} numeric {numeric:e}")
            });
        }
    }
    report
}

/// Combines central differences at `h` and `h / 2` to cancel the `h²` error
/// term.
pub fn richardson(mut central: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting
/// one half.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut favourable = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                favourable += 1.0;
            } else if si == sj {
                favourable += 0.5;
            }
        }
    }
    favourable / pairs
}

/// Sweeps every distinct score as a threshold from high to low, recounting
/// precision and recall from scratch each time.
pub fn brute_force_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = labels.iter().filter(|&&y| y).count() as f64;
    let mut previous_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (&s, &y) in scores.iter().zip(labels) {
            if s >= t {
                predicted += 1.0;
                if y {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - previous_recall) * (tp / predicted);
        previous_recall = recall;
    }
    ap
}

pub fn tiny_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        max_len,
        dim: 8,
        heads: 2,
        key_dim: 4,
        ff_dim: 8,
        head_hidden: 4,
        ..ModelConfig::custom()
    }
}

/// Rescales every parameter of `model` to spread `std`, with layer-norm
/// gains drawn around 1, so gradients are far from zero everywhere.
pub fn spread_parameters(model: &Model, std: f64, seed: u64) -> Model {
    let mut r = rng(seed);
    let tensors = model
        .params()
        .iter()
        .map(|p| {
            let gain = p.name.ends_with(".gain");
            let t = Tensor::from_fn(p.tensor.shape().to_vec(), |_| {
                let x = r.random_range(-std..std) as f32;
                if gain {
                    1.0 + x
                } else {
                    x
                }
            });
            (p.name.clone(), t)
        })
        .collect();
    Model::from_tensors(model.config().clone(), tensors).unwrap()
}

/// A random example of `real` tokens padded to `len`.
pub fn random_example(r: &mut ChaCha8Rng, vocab_size: usize, real: usize, len: usize) -> EncodedExample {
    let ids: Vec<usize> = (0..len)
        .map(|i| if i < real { r.random_range(1..vocab_size) } else { 0 })
        .collect();
    EncodedExample {
        mask: (0..len).map(|i| i < real).collect(),
        words: ids[..real].iter().map(|id| format!("t{id}")).collect(),
        ids,
        label: Some(if r.random_bool(0.5) { Label::Deceptive } else { Label::Truthful }),
    }
}

type Build<T> = Box<dyn Fn(&mut Graph<'_, T>, &[Var]) -> Var>;
pub type OpCase<T> = (&'static str, Vec<Tensor<T>>, Build<T>);

/// Every differentiable graph op, each with random inputs of `scale` spread.
pub fn op_cases<T: Scalar>(seed: u64) -> Vec<OpCase<T>> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor::<T>(&mut r, shape, 1.0);
    let key_mask = vec![true, true, false, true, true, false, false, false];
    let len_mask = vec![true, true, true, false, true, false, false, false];
    let labels: Vec<T> = [1.0, 0.0, 0.0, 1.0, 1.0].iter().map(|&x| T::lit(x)).collect();
    vec![
        ("matmul", vec![t(&[3, 4]), t(&[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_rank3_by_matrix", vec![t(&[2, 3, 4]), t(&[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_batched", vec![t(&[2, 3, 4]), t(&[2, 4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("add_broadcast", vec![t(&[2, 3, 4]), t(&[4])], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("mul_broadcast", vec![t(&[2, 3, 4]), t(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("affine", vec![t(&[3, 4])], Box::new(|g, v| g.affine(v[0], T::lit(1.7), T::lit(-0.3)))),
        ("reshape", vec![t(&[2, 6])], Box::new(|g, v| g.reshape(v[0], [3, 4]).unwrap())),
        ("transpose", vec![t(&[2, 3, 4])], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        ("concat_middle", vec![t(&[2, 3, 4]), t(&[2, 2, 4])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap())),
        ("concat_last", vec![t(&[2, 3, 4]), t(&[2, 3, 2])], Box::new(|g, v| g.concat(&[v[0], v[1]], 2).unwrap())),
        ("narrow", vec![t(&[2, 3, 4])], Box::new(|g, v| g.narrow(v[0], 2, 1, 2).unwrap())),
        ("gather", vec![t(&[6, 3])], Box::new(|g, v| g.gather(v[0], &[0, 5, 2, 2]).unwrap())),
        ("softmax", vec![t(&[3, 5])], Box::new(|g, v| g.softmax(v[0]).unwrap())),
        (
            "masked_softmax",
            vec![t(&[2, 3, 4])],
            Box::new(move |g, v| g.masked_softmax(v[0], &key_mask).unwrap()),
        ),
        (
            "layer_norm",
            vec![t(&[3, 6]), t(&[6]), t(&[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], T::lit(1e-6)).unwrap()),
        ),
        (
            "dropout",
            vec![t(&[4, 5])],
            Box::new(|g, v| g.dropout(v[0], 0.3, true, &mut rng(3)).unwrap()),
        ),
        ("sum_axis", vec![t(&[2, 3, 4])], Box::new(|g, v| g.sum_axis(v[0], 1).unwrap())),
        ("mean_axis", vec![t(&[2, 3, 4])], Box::new(|g, v| g.mean_axis(v[0], 2).unwrap())),
        (
            "masked_mean",
            vec![t(&[2, 4, 3])],
            Box::new(move |g, v| g.masked_mean(v[0], &len_mask).unwrap()),
        ),
        ("sigmoid", vec![t(&[3, 4])], Box::new(|g, v| g.sigmoid(v[0]))),
        ("gelu", vec![t(&[3, 4])], Box::new(|g, v| g.gelu(v[0]))),
        (
            "bce",
            vec![t(&[5])],
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0]);
                g.bce(p, &labels).unwrap()
            }),
        ),
        (
            "three_layer_composition",
            vec![t(&[3, 4]), t(&[4, 5]), t(&[5]), t(&[5, 2])],
            Box::new(|g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add(h, v[2]).unwrap();
                let h = g.gelu(h);
                let o = g.matmul(h, v[3]).unwrap();
                g.sigmoid(o)
            }),
        ),
    ]
}

/// Runs [`check_gradients`] on every case of [`op_cases`]. Finite
/// differences are taken on the f64 instantiation of the same case.
pub fn op_suite<T: Scalar>(step: f64, floor: f64, probes_per_input: usize, seed: u64) -> Vec<(String, ProbeReport)> {
    op_cases::<T>(seed)
        .into_iter()
        .zip(op_cases::<f64>(seed))
        .enumerate()
        .map(|(i, ((name, inputs, build), (_, _, oracle)))| {
            let report = check_gradients(
                name,
                &inputs,
                &*build,
                &*oracle,
                step,
                1.0,
                probes_per_input,
                floor,
                seed + i as u64,
            );
            (name.to_string(), report)
        })
        .collect()
}

/// Inference forward pass of a custom or distil model written directly
/// against the graph ops, in f64, from named parameter tensors.
pub fn reference_probabilities(
    config: &ModelConfig,
    params: &HashMap<String, Tensor<f64>>,
    batch: &[EncodedExample],
) -> Vec<f64> {
    let mut g: Graph<'_, f64> = Graph::new();
    let p = |g: &mut Graph<'_, f64>, name: &str| g.leaf(params[name].clone(), false);
    let (b, len, dim) = (batch.len(), batch[0].ids.len(), config.dim);
    let ids: Vec<usize> = batch.iter().flat_map(|e| e.ids.clone()).collect();
    let mask: Vec<bool> = batch.iter().flat_map(|e| e.mask.clone()).collect();
    let eps = config.layer_norm_eps() as f64;

    let table = p(&mut g, "embedding.token");
    let tokens = g.gather(table, &ids).unwrap();
    let tokens = g.reshape(tokens, [b, len, dim]).unwrap();
    let positions = p(&mut g, "embedding.position");
    let positions = g.narrow(positions, 0, 0, len).unwrap();
    let mut x = g.add(tokens, positions).unwrap();
    if params.contains_key("embedding.norm.gain") {
        let (gain, bias) = (p(&mut g, "embedding.norm.gain"), p(&mut g, "embedding.norm.bias"));
        x = g.layer_norm(x, gain, bias, eps).unwrap();
    }
    let dense = |g: &mut Graph<'_, f64>, x: Var, name: &str| {
        let w = p(g, &format!("{name}.weight"));
        let bias = p(g, &format!("{name}.bias"));
        let y = g.matmul(x, w).unwrap();
        g.add(y, bias).unwrap()
    };
    let norm = |g: &mut Graph<'_, f64>, x: Var, name: &str| {
        let gain = p(g, &format!("{name}.gain"));
        let bias = p(g, &format!("{name}.bias"));
        g.layer_norm(x, gain, bias, eps).unwrap()
    };
    for layer in 0..config.layers {
        let block = format!("block{layer}");
        let q = dense(&mut g, x, &format!("{block}.attention.query"));
        let k = dense(&mut g, x, &format!("{block}.attention.key"));
        let v = dense(&mut g, x, &format!("{block}.attention.value"));
        let heads: Vec<Var> = (0..config.heads)
            .map(|h| {
                let start = h * config.key_dim;
                let qh = g.narrow(q, 2, start, config.key_dim).unwrap();
                let kh = g.narrow(k, 2, start, config.key_dim).unwrap();
                let vh = g.narrow(v, 2, start, config.key_dim).unwrap();
                let kt = g.transpose(kh).unwrap();
                let scores = g.matmul(qh, kt).unwrap();
                let scores = g.scale(scores, 1.0 / (config.key_dim as f64).sqrt());
                let weights = g.masked_softmax(scores, &mask).unwrap();
                g.matmul(weights, vh).unwrap()
            })
            .collect();
        let merged = g.concat(&heads, 2).unwrap();
        let attended = dense(&mut g, merged, &format!("{block}.attention.output"));
        let residual = g.add(x, attended).unwrap();
        let x1 = norm(&mut g, residual, &format!("{block}.attention_norm"));
        let inner = dense(&mut g, x1, &format!("{block}.ffn.inner"));
        let inner = g.gelu(inner);
        let outer = dense(&mut g, inner, &format!("{block}.ffn.outer"));
        let residual = g.add(x1, outer).unwrap();
        x = norm(&mut g, residual, &format!("{block}.ffn_norm"));
    }
    let pooled = g.masked_mean(x, &mask).unwrap();
    let hidden = dense(&mut g, pooled, "head.hidden");
    let hidden = g.gelu(hidden);
    let logits = dense(&mut g, hidden, "head.output");
    let probabilities = g.sigmoid(logits);
    g.value(probabilities).data().to_vec()
}

pub fn wide_params(model: &Model) -> HashMap<String, Tensor<f64>> {
    model.params().iter().map(|p| (p.name.clone(), p.tensor.cast())).collect()
}

/// Checks the f32 BCE-loss gradient of a whole model with respect to its
/// parameters against central differences of [`reference_probabilities`].
/// Probes only coordinates that influence the batch: token rows that occur
/// in it and positions below its length.
pub fn check_model_gradients(
    model: &Model,
    batch: &[EncodedExample],
    probes: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> ProbeReport {
    use veracity::model::ForwardOptions;
    let labels: Vec<f32> = batch.iter().map(|e| e.label.unwrap().bit() as f32).collect();
    let mut g = Graph::new();
    let opts = ForwardOptions {
        train_params: true,
        track_embedding: false,
        training: false,
    };
    let vars = model.forward_graph(&mut g, batch, opts, &mut rng(0)).unwrap();
    let loss = g.bce(vars.probabilities, &labels).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec())))
        .collect();
    drop(g);

    let mut wide = wide_params(model);
    let loss_of = |params: &HashMap<String, Tensor<f64>>| -> f64 {
        let p = reference_probabilities(model.config(), params, batch);
        p.iter()
            .zip(&labels)
            .map(|(&p, &y)| -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln()))
            .sum::<f64>()
            / p.len() as f64
    };
    let len = batch[0].ids.len();
    let used: Vec<usize> = batch.iter().flat_map(|e| e.ids.iter().copied()).collect();
    let mut r = rng(seed);
    let mut report = ProbeReport::new();
    while report.probes < probes {
        let which = r.random_range(0..model.params().len());
        let p = &model.params()[which];
        let width = p.tensor.shape().last().copied().unwrap_or(1);
        let index = match p.name.as_str() {
            "embedding.token" => used[r.random_range(0..used.len())] * width + r.random_range(0..width),
            "embedding.position" => r.random_range(0..len * width),
            _ => r.random_range(0..p.tensor.len()),
        };
        let base = wide[&p.name].data()[index];
        let h = step * base.abs().max(1.0);
        let mut at = |x: f64| {
            wide.get_mut(&p.name).unwrap().data_mut()[index] = x;
            loss_of(&wide)
        };
        let numeric = richardson(|h| (at(base + h) - at(base - h)) / (2.0 * h), h);
        wide.get_mut(&p.name).unwrap().data_mut()[index] = base;
        let analytic = grads[which].data()[index] as f64;
        report.record(relative_error(analytic, numeric, floor), || {
            format!("{}[{index}]: analytic {analytic:e} numeric {numeric:e}", p.name)
        });
    }
    report
}

/// Saliency of a single example from central differences of
/// [`reference_probabilities`]. With a batch of one, the gradient with
/// respect to row `i` of the position table is the gradient with respect to
/// the summed embedding of token `i`.
pub fn reference_saliency(model: &Model, example: &EncodedExample, step: f64) -> Vec<f64> {
    let batch = std::slice::from_ref(example);
    let mut wide = wide_params(model);
    let p = reference_probabilities(model.config(), &wide, batch)[0];
    let deceptive = p >= 0.5;
    let dim = model.config().dim;
    let raw: Vec<f64> = (0..example.real_len())
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let index = i * dim + d;
                    let base = wide["embedding.position"].data()[index];
                    let mut at = |x: f64| {
                        wide.get_mut("embedding.position").unwrap().data_mut()[index] = x;
                        let q = reference_probabilities(model.config(), &wide, batch)[0];
                        if deceptive {
                            q
                        } else {
                            1.0 - q
                        }
                    };
                    let derivative = richardson(|h| (at(base + h) - at(base - h)) / (2.0 * h), step);
                    wide.get_mut("embedding.position").unwrap().data_mut()[index] = base;
                    derivative.abs()
                })
                .sum()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}
