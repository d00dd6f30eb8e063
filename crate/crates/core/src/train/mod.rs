//! Synthetic tasks, the Adam optimizer, pre-training and frozen-backbone
//! fine-tuning loops, and checkpoint files.

mod adam;
mod checkpoint;
mod probe;
mod task;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, load_model, save_checkpoint, save_model, Checkpoint, CheckpointHeader, ModelHeader,
    TensorInfo, CHECKPOINT_MAGIC, FORMAT_VERSION, MODEL_MAGIC,
};
pub use probe::{fit_probe, low_rank_floor, ProbeConfig, ProbeReport};
pub use task::{gen_classify, gen_probe, gen_task, ClassifyData, ClassifySplit, Dataset, ProbeData, ProbeDelta, TaskKind, TaskSpec};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{EncoderModel, ParamKey, TuneMode};
use crate::scalar::{Precision, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Stop once the monitored accuracy (train accuracy while pre-training,
    /// eval accuracy while fine-tuning) reaches this value.
    pub stop_at_accuracy: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            stop_at_accuracy: None,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// Defaults for full fine-tuning (`lr = 3e-4`).
    pub fn full_finetune() -> Self {
        Self {
            learning_rate: 3e-4,
            ..Self::default()
        }
    }

    /// Checks used for user-supplied configs. The training functions
    /// themselves also accept `lr = 0` and `epochs = 0`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport<T: Scalar> {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Trainable tensors at the best epoch.
    pub best_state: Vec<(ParamKey, Matrix<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_BATCH: usize = 64;

/// Mean cross-entropy and accuracy over a split.
pub fn evaluate<T: Scalar>(model: &EncoderModel<T>, split: &ClassifySplit) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (inputs, labels) in split.inputs.chunks(EVAL_BATCH).zip(split.labels.chunks(EVAL_BATCH)) {
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, inputs, false)?;
        let ce = g.cross_entropy(out.logits, labels.to_vec())?;
        loss += g.value(ce).get(0, 0).to_f64_lossy() * labels.len() as f64;
        correct += predictions(g.value(out.logits))
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let n = split.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Row-wise argmax (first index on ties).
pub fn predictions<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// One optimizer step on a mini-batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut EncoderModel<T>,
    inputs: &[Vec<usize>],
    labels: &[usize],
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, keys, mut grads) = {
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, inputs, true)?;
        let loss = g.cross_entropy(out.logits, labels.to_vec())?;
        g.backward(loss)?;
        let value = g.value(loss).get(0, 0).to_f64_lossy();
        let (keys, grads): (Vec<ParamKey>, Vec<Matrix<T>>) = out
            .trainable
            .iter()
            .map(|&(k, id)| {
                let grad = g.grad(id).cloned().unwrap_or_else(|| {
                    let (r, c) = g.value(id).shape();
                    Matrix::zeros(r, c)
                });
                (k, grad)
            })
            .unzip();
        (value, keys, grads)
    };
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: adam.steps() as usize,
            loss,
        });
    }
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    let acfg = cfg.adam();
    adam.begin_step();
    for (i, (key, grad)) in keys.into_iter().zip(&grads).enumerate() {
        let p = model.param_mut(key).expect("trainable key exists");
        adam.update(i, p, grad, &acfg)?;
    }
    Ok(loss)
}

fn new_adam<T: Scalar>(model: &EncoderModel<T>) -> AdamState<T> {
    AdamState::new(
        model
            .trainable_keys()
            .into_iter()
            .map(|k| model.param(k).expect("trainable key exists").shape()),
    )
}

fn snapshot<T: Scalar>(model: &EncoderModel<T>) -> Vec<(ParamKey, Matrix<T>)> {
    model
        .trainable_keys()
        .into_iter()
        .map(|k| (k, model.param(k).expect("trainable key exists").clone()))
        .collect()
}

fn restore<T: Scalar>(model: &mut EncoderModel<T>, state: &[(ParamKey, Matrix<T>)]) {
    for (k, m) in state {
        *model.param_mut(*k).expect("snapshot keys exist") = m.clone();
    }
}

fn run_epoch<T: Scalar>(
    model: &mut EncoderModel<T>,
    split: &ClassifySplit,
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let inputs: Vec<Vec<usize>> = chunk.iter().map(|&i| split.inputs[i].clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| split.labels[i]).collect();
        total += train_step(model, &inputs, &labels, adam, cfg)?;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Full-parameter training of a fresh model. Stops early once train accuracy
/// reaches `cfg.stop_at_accuracy`.
pub fn pretrain<T: Scalar>(model: &mut EncoderModel<T>, data: &ClassifyData, cfg: &TrainConfig) -> Result<TrainReport<T>> {
    if model.mode() != TuneMode::Full {
        return Err(Error::InvalidSpec("pretraining expects a model without adapters".into()));
    }
    let mut adam = new_adam(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let train_loss = run_epoch(model, &data.train, &mut adam, cfg, &mut rng)?;
        let train = evaluate(model, &data.train)?;
        let eval = evaluate(model, &data.eval)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            eval_loss: eval.loss,
            eval_metric: eval.accuracy,
            train_metric: Some(train.accuracy),
        });
        if cfg.stop_at_accuracy.is_some_and(|t| train.accuracy >= t) {
            break;
        }
    }
    let last = records.last().map_or(0.0, |r| r.eval_metric);
    Ok(TrainReport {
        best_epoch: records.len(),
        best_metric: last,
        steps: adam.steps() as usize,
        records,
        best_state: snapshot(model),
    })
}

/// Trains only the model's trainable set, auditing the frozen backbone after
/// every epoch. Epoch 0 is the untouched model. The model is left holding
/// the state of the best epoch (highest eval accuracy, earliest on ties).
pub fn finetune<T: Scalar>(model: &mut EncoderModel<T>, data: &ClassifyData, cfg: &TrainConfig) -> Result<TrainReport<T>> {
    let frozen = model.frozen_hash();
    let mut adam = new_adam(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = evaluate(model, &data.eval)?;
    let train = evaluate(model, &data.train)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: train.loss,
        eval_loss: eval.loss,
        eval_metric: eval.accuracy,
        train_metric: Some(train.accuracy),
    }];
    let mut best = (0, eval.accuracy, snapshot(model));
    for epoch in 1..=cfg.epochs {
        let train_loss = run_epoch(model, &data.train, &mut adam, cfg, &mut rng)?;
        if model.frozen_hash() != frozen {
            return Err(Error::InvariantViolation(format!(
                "frozen parameters changed during epoch {epoch}"
            )));
        }
        let eval = evaluate(model, &data.eval)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            eval_loss: eval.loss,
            eval_metric: eval.accuracy,
            train_metric: None,
        });
        if eval.accuracy > best.1 {
            best = (epoch, eval.accuracy, snapshot(model));
        }
        if cfg.stop_at_accuracy.is_some_and(|t| eval.accuracy >= t) {
            break;
        }
    }
    restore(model, &best.2);
    Ok(TrainReport {
        records,
        steps: adam.steps() as usize,
        best_epoch: best.0,
        best_metric: best.1,
        best_state: best.2,
    })
}

/// Writes one JSON object per line.
pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
