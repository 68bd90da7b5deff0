//! Classifier families over log-mel inputs `B × 1 × n_mels × T`.
//!
//! A [`Model`] owns a named parameter registry in 32-bit floats. A forward
//! pass first [`Model::bind`]s every parameter onto a [`Tape`] of any
//! [`Real`] type, so the same model runs in f32 for training and in f64 for
//! gradient checks.

mod checkpoint;
mod cnn;
mod transformer;

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::peft::{Adapters, ADAPTER_PREFIXES};
use crate::tensor::{BatchStats, Real, Tape, Tensor, TensorError, Var};

pub use cnn::{CompactCnnConfig, PoolKind};
pub use transformer::{patchify, SpecTransformerConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not fit the model: {msg}")]
    Input { got: Vec<usize>, msg: String },
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
    #[error("unknown parameter {0}")]
    Missing(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    Transformer,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cnn => "cnn",
            Family::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    Cnn(CompactCnnConfig),
    Transformer(SpecTransformerConfig),
}

impl Architecture {
    pub fn family(&self) -> Family {
        match self {
            Architecture::Cnn(_) => Family::Cnn,
            Architecture::Transformer(_) => Family::Transformer,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Architecture::Cnn(c) => c.n_classes,
            Architecture::Transformer(c) => c.n_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    /// Non-learned state such as batchnorm running statistics.
    Buffer,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor<f32>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    pub(crate) fn weight(value: Tensor<f32>) -> Self {
        Self { value, kind: ParamKind::Weight, trainable: true }
    }

    pub(crate) fn buffer(value: Tensor<f32>) -> Self {
        Self { value, kind: ParamKind::Buffer, trainable: false }
    }
}

/// Tape handles of a model's parameters for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::Missing(name.into()))
    }

    /// Replaces a binding, e.g. with an externally created leaf.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-pass mode: dropout and batch statistics are active only in training.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub train: bool,
    pub(crate) rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { train: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        Self { train: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

pub struct ForwardOut<T> {
    pub logits: Var,
    /// Input to the final classification layer.
    pub features: Var,
    /// Updated running statistics per batchnorm layer (training only).
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: IndexMap<String, Param>,
    adapters: Adapters,
}

impl Model {
    /// Builds a freshly initialized model.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &arch {
            Architecture::Cnn(c) => cnn::init(c, &mut rng)?,
            Architecture::Transformer(c) => transformer::init(c, &mut rng)?,
        };
        Ok(Self { arch, params, adapters: Adapters::default() })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn family(&self) -> Family {
        self.arch.family()
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    pub fn transformer_config(&self) -> Option<&SpecTransformerConfig> {
        match &self.arch {
            Architecture::Transformer(c) => Some(c),
            Architecture::Cnn(_) => None,
        }
    }

    pub fn params(&self) -> &IndexMap<String, Param> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| ModelError::Missing(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| ModelError::Missing(name.into()))
    }

    pub fn insert_param(&mut self, name: String, p: Param) -> Result<()> {
        if self.params.contains_key(&name) {
            return Err(ModelError::Duplicate(name));
        }
        self.params.insert(name, p);
        Ok(())
    }

    pub fn adapters(&self) -> &Adapters {
        &self.adapters
    }

    pub(crate) fn set_adapters(&mut self, a: Adapters) {
        self.adapters = a;
    }

    pub fn is_adapter(name: &str) -> bool {
        ADAPTER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Marks every parameter frozen.
    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    /// Names of the classifier parameters. With `with_hidden`, the CNN's
    /// hidden fully connected layer counts as part of the classifier.
    pub fn classifier_params(&self, with_hidden: bool) -> Vec<String> {
        let mut v = vec!["head.weight".to_string(), "head.bias".to_string()];
        if with_hidden && self.family() == Family::Cnn {
            v.extend(["fc.weight".to_string(), "fc.bias".to_string()]);
        }
        v
    }

    /// Scale-shift attach points and their channel widths.
    pub fn ssf_points(&self) -> Vec<(String, usize)> {
        match &self.arch {
            Architecture::Cnn(c) => cnn::ssf_points(c),
            Architecture::Transformer(c) => transformer::ssf_points(c),
        }
    }

    /// Creates one tape leaf per weight and adapter.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bindings {
        let mut b = Bindings::default();
        for (name, p) in &self.params {
            if p.kind != ParamKind::Buffer {
                b.vars.insert(name.clone(), tape.leaf(p.value.cast(), p.trainable));
            }
        }
        b
    }

    pub(crate) fn buffer<T: Real>(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.param(name)?.value.data().iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        input: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardOut<T>> {
        match &self.arch {
            Architecture::Cnn(c) => cnn::forward(self, c, tape, b, input, ctx),
            Architecture::Transformer(c) => transformer::forward(self, c, tape, b, input, ctx),
        }
    }

    /// Stores running statistics produced by a training forward pass.
    pub fn commit_stats<T: Real>(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        for (layer, s) in stats {
            for (suffix, v) in [("running_mean", &s.running_mean), ("running_var", &s.running_var)] {
                let p = self.param_mut(&format!("{layer}.{suffix}"))?;
                for (d, x) in p.value.data_mut().iter_mut().zip(v.iter()) {
                    *d = x.as_f64() as f32;
                }
            }
        }
        Ok(())
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &b, x, &mut ForwardCtx::eval())?;
        Ok(tape.value(out.logits).clone())
    }

    fn check_input(&self, s: &[usize], n_mels: usize, min_frames: usize) -> Result<()> {
        if s.len() != 4 || s[1] != 1 || s[2] != n_mels || s[3] < min_frames {
            return Err(ModelError::Input {
                got: s.to_vec(),
                msg: format!("expected B x 1 x {n_mels} x T with T >= {min_frames}"),
            });
        }
        Ok(())
    }
}

/// Applies the scale-shift hook at `point` when enabled.
pub(crate) fn ssf_hook<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    b: &Bindings,
    point: &str,
    x: Var,
    axis: usize,
) -> Result<Var> {
    if !model.adapters.ssf {
        return Ok(x);
    }
    let (s, h) = crate::peft::ssf_names(point);
    Ok(crate::peft::ssf_apply(tape, x, b.get(&s)?, b.get(&h)?, axis)?)
}

pub(crate) fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    use rand::Rng;
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

pub(crate) fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect()).expect("shape")
}

pub use checkpoint::{load_checkpoint, save_adapters, save_checkpoint, CHECKPOINT_MAGIC};
