//! Binary cross-entropy training with AdamW and gradient accumulation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Mode, Model, Param};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::EncodedExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 4,
            weight_decay: 0.01,
            accumulation_steps: 2,
            epochs: 5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size, accumulation steps and epochs must be at least 1"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        let betas = [self.adam_beta1, self.adam_beta2];
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) || self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::invalid("adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}

/// Records mean binary cross-entropy between `probabilities` and `labels`.
pub fn bce_loss<'p>(g: &mut Graph<'p, f32>, probabilities: Var, labels: &[f32]) -> Result<Var> {
    g.bce(probabilities, labels)
}

/// First and second moment estimates of AdamW.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }
}

/// One AdamW update: bias-corrected Adam step, then decoupled decay
/// `w <- w * (1 - lr * wd)` on parameters marked for decay.
pub fn adamw_step(params: &mut [Param], grads: &[Tensor], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len(), state.first.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape("adamw_step", p.tensor.shape(), g.shape()));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let correction1 = 1.0 - (b1 as f64).powi(t);
    let correction2 = 1.0 - (b2 as f64).powi(t);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = (m[j] as f64 / correction1) as f32;
            let v_hat = (v[j] as f64 / correction2) as f32;
            *w -= lr * m_hat / (v_hat.sqrt() + config.adam_epsilon);
            if p.decay {
                *w *= decay;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Optimizer steps taken by the end of this epoch.
    pub step: usize,
    /// Mean of this epoch's per-step losses.
    pub loss: f32,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

impl fmt::Display for EpochStats {
    /// One `epoch,step,loss,train_acc,eval_acc` progress line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:.6},{:.4},", self.epoch, self.step, self.loss, self.train_accuracy)?;
        match self.eval_accuracy {
            Some(a) => write!(f, "{a:.4}"),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean unscaled micro-batch loss of every optimizer step.
    pub step_losses: Vec<f32>,
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_epoch(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// Epoch with the highest eval accuracy (earliest on ties).
    pub fn best_epoch(&self) -> Option<&EpochStats> {
        self.epochs.iter().fold(None, |best: Option<&EpochStats>, e| match best {
            Some(b) if b.eval_accuracy.unwrap_or(0.0) >= e.eval_accuracy.unwrap_or(0.0) => Some(b),
            _ => Some(e),
        })
    }
}

pub const PROGRESS_HEADER: &str = "epoch,step,loss,train_acc,eval_acc";

const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains `model` in place. `on_epoch` sees the stats of every finished
/// epoch.
pub fn train(
    model: &mut Model,
    train_set: &[EncodedExample],
    eval_set: &[EncodedExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let targets = label_values(train_set)?;
    label_values(eval_set)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut state = AdamState::new(model.params());
    let mut accumulated: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
    let mut history = TrainHistory::default();
    let scale = 1.0 / config.accumulation_steps as f32;
    model.set_mode(Mode::Train);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut group_losses: Vec<f32> = Vec::with_capacity(config.accumulation_steps);
        let epoch_start = history.step_losses.len();
        let step_now = |model: &mut Model,
                            accumulated: &mut Vec<Tensor>,
                            group_losses: &mut Vec<f32>,
                            state: &mut AdamState,
                            history: &mut TrainHistory|
         -> Result<()> {
            adamw_step(model.params_mut(), accumulated, state, config)?;
            for t in accumulated.iter_mut() {
                t.data_mut().fill(0.0);
            }
            history
                .step_losses
                .push(group_losses.iter().sum::<f32>() / group_losses.len() as f32);
            group_losses.clear();
            Ok(())
        };

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let labels: Vec<f32> = chunk.iter().map(|&i| targets[i]).collect();
            {
                let mut g = Graph::new();
                let vars = model.forward_graph(&mut g, &batch, ForwardOptions::training(), &mut dropout_rng)?;
                let loss = bce_loss(&mut g, vars.probabilities, &labels)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: state.step() + 1,
                    });
                }
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
                for (acc, &v) in accumulated.iter_mut().zip(&vars.params) {
                    if let Some(grad) = g.grad(v) {
                        acc.add_assign(grad);
                    }
                }
                group_losses.push(value);
            }
            if group_losses.len() == config.accumulation_steps {
                step_now(model, &mut accumulated, &mut group_losses, &mut state, &mut history)?;
            }
        }
        if !group_losses.is_empty() {
            step_now(model, &mut accumulated, &mut group_losses, &mut state, &mut history)?;
        }

        let epoch_losses = &history.step_losses[epoch_start..];
        let stats = EpochStats {
            epoch,
            step: state.step(),
            loss: epoch_losses.iter().sum::<f32>() / epoch_losses.len().max(1) as f32,
            train_accuracy: accuracy(model, train_set)?,
            eval_accuracy: if eval_set.is_empty() {
                None
            } else {
                Some(accuracy(model, eval_set)?)
            },
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    model.set_mode(Mode::Infer);
    Ok(history)
}

fn label_values(examples: &[EncodedExample]) -> Result<Vec<f32>> {
    examples
        .iter()
        .map(|e| {
            e.label
                .map(|l| l.bit() as f32)
                .ok_or_else(|| Error::invalid("training example without a label"))
        })
        .collect()
}

const PREDICT_BATCH: usize = 32;

/// Inference-mode probabilities for any number of examples.
pub fn predict_all(model: &Model, examples: &[EncodedExample]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(PREDICT_BATCH) {
        out.extend(model.predict(chunk)?);
    }
    Ok(out)
}

/// Fraction of labelled examples classified correctly at threshold 0.5.
pub fn accuracy(model: &Model, examples: &[EncodedExample]) -> Result<f64> {
    let probabilities = predict_all(model, examples)?;
    let correct = probabilities
        .iter()
        .zip(examples)
        .filter(|(&p, e)| e.label == Some(if p >= 0.5 { Label::Deceptive } else { Label::Truthful }))
        .count();
    Ok(correct as f64 / examples.len().max(1) as f64)
}
