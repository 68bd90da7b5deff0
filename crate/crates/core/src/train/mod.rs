//! Loss, optimizers, the epoch loop with gradient accumulation, evaluation
//! and the full fit with plateau scheduling and early stopping.

mod metrics;
mod optim;

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Bindings, ForwardCtx, Model, ModelError};
use crate::peft::param_stats;
use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError};

pub use metrics::{accuracy, argmax_rows, confusion_matrix, macro_f1};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, PlateauScheduler};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("feature length {got} does not match {expected}")]
    Features { expected: usize, got: usize },
    #[error("optimizer state mismatch: {0}")]
    State(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { op } => TrainError::NonFinite(op.to_string()),
            other => TrainError::Tensor(other),
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => TrainError::Model(other),
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Labeled log-mel features held in memory, one `n_mels × n_frames` image
/// per item.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_mels: usize,
    n_frames: usize,
    n_classes: usize,
    x: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(n_mels: usize, n_frames: usize, n_classes: usize) -> Self {
        Self { n_mels, n_frames, n_classes, x: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, features: &[f32], label: usize) -> Result<()> {
        if features.len() != self.item_len() {
            return Err(TrainError::Features { expected: self.item_len(), got: features.len() });
        }
        if label >= self.n_classes {
            return Err(TrainError::Label { label, n_classes: self.n_classes });
        }
        self.x.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn item_len(&self) -> usize {
        self.n_mels * self.n_frames
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.x[i * self.item_len()..(i + 1) * self.item_len()]
    }

    /// Stacks items into a `B × 1 × n_mels × n_frames` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.item_len());
        for &i in idx {
            data.extend_from_slice(self.features(i));
        }
        Tensor::new(&[idx.len(), 1, self.n_mels, self.n_frames], data).expect("batch shape")
    }

    /// Mean and population standard deviation over every value.
    pub fn moments(&self) -> (f32, f32) {
        if self.x.is_empty() {
            return (0.0, 1.0);
        }
        let n = self.x.len() as f64;
        let mean = self.x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean as f32, var.sqrt().max(1e-8) as f32)
    }

    pub fn standardize(&mut self, mean: f32, std: f32) {
        for v in &mut self.x {
            *v = (*v - mean) / std;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, accumulation_steps: 2, max_epochs: 50, early_stop_patience: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size, accumulation_steps and max_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }
}

/// Gradients accumulated per trainable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    grads: IndexMap<String, Vec<f32>>,
}

impl GradStore {
    pub fn insert(&mut self, name: &str, g: Vec<f32>) {
        self.grads.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    /// Adds the tape gradients of every trainable parameter.
    pub fn accumulate(&mut self, model: &Model, tape: &Tape<f32>, b: &Bindings) -> Result<()> {
        for (name, p) in model.params() {
            if !p.trainable {
                continue;
            }
            let Some(g) = tape.grad(b.get(name)?) else { continue };
            match self.grads.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x),
                None => {
                    self.grads.insert(name.clone(), g.to_vec());
                }
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `B × C` logits; gradient `(softmax − onehot)/B`.
pub fn cross_entropy(tape: &mut Tape<f32>, logits: crate::tensor::Var, labels: &[usize]) -> Result<crate::tensor::Var> {
    let c = tape.shape(logits).get(1).copied().unwrap_or(0);
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(TrainError::Label { label, n_classes: c });
    }
    Ok(tape.cross_entropy(logits, labels)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Mean of micro-batch losses.
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub micro_batches: usize,
    pub optimizer_steps: usize,
}

/// Runs one epoch: shuffle, micro-batches, and one optimizer step per
/// `accumulation_steps` micro-batches (a trailing partial group still
/// steps). Each micro-batch loss is scaled by `1 / accumulation_steps`.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::stream(cfg.seed, &[0x5F, epoch as u64]));
    let scale = 1.0 / cfg.accumulation_steps as f32;
    let mut grads = GradStore::default();
    let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    let (mut micro, mut steps, mut pending) = (0, 0, 0);
    for chunk in order.chunks(cfg.batch_size) {
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::<f32>::new();
        let b = model.bind(&mut tape);
        let x = tape.constant(data.batch(chunk));
        let mut ctx = ForwardCtx::train(seed::derive(cfg.seed, &[0xD0, epoch as u64, micro as u64]));
        let out = model.forward(&mut tape, &b, x, &mut ctx)?;
        let loss = cross_entropy(&mut tape, out.logits, &y)?;
        let scaled = tape.scale(loss, scale)?;
        tape.backward(scaled)?;
        grads.accumulate(model, &tape, &b)?;
        model.commit_stats(&out.bn_stats)?;

        loss_sum += tape.value(loss).item() as f64;
        preds.extend(argmax_rows(tape.value(out.logits).data(), data.n_classes));
        labels.extend(y);
        micro += 1;
        pending += 1;
        if pending == cfg.accumulation_steps {
            opt.step(model, &grads)?;
            grads.clear();
            steps += 1;
            pending = 0;
        }
    }
    if pending > 0 {
        opt.step(model, &grads)?;
        steps += 1;
    }
    Ok(EpochReport {
        loss: loss_sum / micro as f64,
        accuracy: accuracy(&preds, &labels),
        f1: macro_f1(&preds, &labels, data.n_classes),
        micro_batches: micro,
        optimizer_steps: steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub preds: Vec<usize>,
}

/// Eval-mode metrics over a split; the loss is the per-sample mean.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut preds) = (0.0, Vec::with_capacity(data.len()));
    for chunk in idx.chunks(batch_size.max(1)) {
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::<f32>::new();
        let b = model.bind(&mut tape);
        let x = tape.constant(data.batch(chunk));
        let out = model.forward(&mut tape, &b, x, &mut ForwardCtx::eval())?;
        let loss = cross_entropy(&mut tape, out.logits, &y)?;
        loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
        preds.extend(argmax_rows(tape.value(out.logits).data(), data.n_classes));
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: accuracy(&preds, &data.labels),
        f1: macro_f1(&preds, &data.labels, data.n_classes),
        preds,
    })
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub lr: f64,
    pub seconds: f64,
    pub trainable_percent: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters at the best monitored epoch.
    pub best: Model,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    pub train_seconds: f64,
}

/// Trains up to `max_epochs`, scheduling the learning rate and stopping
/// early on the monitored loss, and keeps the parameters with the best
/// monitored accuracy (ties: lower loss, then earlier epoch).
pub fn fit(
    mut model: Model,
    train: &Dataset,
    monitor: &Dataset,
    opt_cfg: OptimizerConfig,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let trainable_percent = param_stats(&model).percent;
    let mut opt = Optimizer::new(opt_cfg, &model);
    let mut sched = PlateauScheduler::new(opt_cfg.lr);
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut best_loss = f64::INFINITY;
    let mut since_improved = 0;
    let mut history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let lr = opt.lr();
        let t0 = Instant::now();
        let tr = train_epoch(&mut model, train, &mut opt, cfg, epoch)?;
        let train_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let ev = evaluate(&model, monitor, cfg.batch_size)?;
        let eval_secs = t1.elapsed().as_secs_f64();
        epochs_run = epoch;
        for rec in [
            EpochRecord { epoch, split: "train".into(), loss: tr.loss, accuracy: tr.accuracy, f1: tr.f1, lr, seconds: train_secs, trainable_percent },
            EpochRecord { epoch, split: "monitor".into(), loss: ev.loss, accuracy: ev.accuracy, f1: ev.f1, lr, seconds: eval_secs, trainable_percent },
        ] {
            on_record(&rec);
            history.push(rec);
        }
        if !ev.loss.is_finite() || !tr.loss.is_finite() {
            return Err(TrainError::NonFinite(format!("loss at epoch {epoch}")));
        }
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => ev.accuracy > *acc || (ev.accuracy == *acc && ev.loss < *loss),
        };
        if better {
            best = Some((ev.accuracy, ev.loss, epoch, model.clone()));
        }
        opt.set_lr(sched.step(ev.loss));
        if ev.loss < best_loss - sched.threshold {
            best_loss = ev.loss;
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_accuracy, best_loss, best_epoch, best) = best.expect("at least one epoch");
    Ok(FitResult {
        best,
        best_epoch,
        best_accuracy,
        best_loss,
        epochs_run,
        history,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}
