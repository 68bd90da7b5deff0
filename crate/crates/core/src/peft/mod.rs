//! Fine-tuning strategies as parameter masks plus adapter wrapping.
//!
//! Adapters live in the model's parameter registry under their own
//! namespaces (`ssf.`, `ia3.`, `oft.`); the model forward consults
//! [`Adapters`] to decide which hooks to run.

pub mod cayley;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Family, Model, ModelError, Param, ParamKind};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

pub use cayley::{cayley, cayley_blocks, orthogonality_error, skew_params};

#[derive(Debug, Error)]
pub enum PeftError {
    #[error("strategy {strategy} is not applicable to the {family} model: {reason}")]
    Inapplicable { strategy: FineTuneStrategy, family: Family, reason: &'static str },
    #[error("I - S is numerically singular")]
    Singular,
    #[error("unknown strategy {0:?}")]
    Unknown(String),
    #[error("invalid adapter option: {0}")]
    Option(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ia3Options {
    /// Also scale queries; off by default.
    pub scale_query: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OftOptions {
    /// Diagonal blocks per rotated weight.
    pub blocks: usize,
}

impl Default for OftOptions {
    fn default() -> Self {
        Self { blocks: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneStrategy {
    Full,
    ClassifierOnly,
    BatchNorm,
    Ssf,
    Ia3(Ia3Options),
    Oft(OftOptions),
}

impl FineTuneStrategy {
    pub const ALL: [FineTuneStrategy; 6] = [
        FineTuneStrategy::Full,
        FineTuneStrategy::ClassifierOnly,
        FineTuneStrategy::BatchNorm,
        FineTuneStrategy::Ssf,
        FineTuneStrategy::Ia3(Ia3Options { scale_query: false }),
        FineTuneStrategy::Oft(OftOptions { blocks: 4 }),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::ClassifierOnly => "classifier_only",
            Self::BatchNorm => "batchnorm",
            Self::Ssf => "ssf",
            Self::Ia3(_) => "ia3",
            Self::Oft(_) => "oft",
        }
    }

    /// Checks the strategy against a model family.
    pub fn check(&self, family: Family) -> Result<(), PeftError> {
        let reason = match (self, family) {
            (Self::BatchNorm, Family::Transformer) => "transformers have no batchnorm layers",
            (Self::Ia3(_), Family::Cnn) => "IA3 scales attention keys and values",
            (Self::Oft(_), Family::Cnn) => "OFT rotates attention projection weights",
            _ => return Ok(()),
        };
        Err(PeftError::Inapplicable { strategy: *self, family, reason })
    }
}

impl fmt::Display for FineTuneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneStrategy {
    type Err = PeftError;
    fn from_str(s: &str) -> Result<Self, PeftError> {
        Ok(match s {
            "full" => Self::Full,
            "classifier_only" | "classifier" => Self::ClassifierOnly,
            "batchnorm" => Self::BatchNorm,
            "ssf" => Self::Ssf,
            "ia3" => Self::Ia3(Ia3Options { scale_query: false }),
            "oft" => Self::Oft(OftOptions::default()),
            other => return Err(PeftError::Unknown(other.into())),
        })
    }
}

/// Adapter hooks active on a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Adapters {
    pub ssf: bool,
    pub ia3: Option<Ia3Options>,
    pub oft: Option<OftOptions>,
}

impl Adapters {
    pub fn is_empty(&self) -> bool {
        !self.ssf && self.ia3.is_none() && self.oft.is_none()
    }
}

/// Namespaces of adapter parameters.
pub const ADAPTER_PREFIXES: [&str; 3] = ["ssf.", "ia3.", "oft."];

pub fn ssf_names(point: &str) -> (String, String) {
    (format!("ssf.{point}.scale"), format!("ssf.{point}.shift"))
}

/// `γ ⊙ x + β` with `γ`, `β` broadcast along every axis except `axis`.
pub fn ssf_apply<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var, TensorError> {
    let s = tape.shape(x).to_vec();
    if axis >= s.len() {
        return Err(TensorError::Invalid { op: "ssf", msg: format!("axis {axis} out of range for {s:?}") });
    }
    for p in [gamma, beta] {
        if tape.shape(p) != [s[axis]] {
            return Err(TensorError::ShapeMismatch { op: "ssf", lhs: vec![s[axis]], rhs: tape.shape(p).to_vec() });
        }
    }
    let mut bs = vec![1; s.len()];
    bs[axis] = s[axis];
    let g = tape.reshape(gamma, &bs)?;
    let b = tape.reshape(beta, &bs)?;
    let y = tape.mul(x, g)?;
    tape.add(y, b)
}

fn adapter(value: Tensor<f32>) -> Param {
    Param { value, kind: ParamKind::Adapter, trainable: true }
}

/// Attaches adapters and sets trainable flags for `strategy`.
///
/// The final classification layer stays trainable under every strategy;
/// base weights are frozen under every strategy except `Full` and the
/// classifier-only and batchnorm masks.
pub fn apply_strategy(mut model: Model, strategy: FineTuneStrategy) -> Result<Model, PeftError> {
    let family = model.family();
    strategy.check(family)?;
    if !model.adapters().is_empty() {
        return Err(PeftError::Option("model already carries adapters".into()));
    }
    let classifier = model.classifier_params(strategy == FineTuneStrategy::ClassifierOnly);
    for (name, p) in model.params_mut() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        p.trainable = match strategy {
            FineTuneStrategy::Full => true,
            FineTuneStrategy::BatchNorm => classifier.contains(name) || model_is_bn(name),
            _ => classifier.contains(name),
        };
    }
    let mut adapters = Adapters::default();
    match strategy {
        FineTuneStrategy::Ssf => {
            for (point, width) in model.ssf_points() {
                let (s, b) = ssf_names(&point);
                model.insert_param(s, adapter(Tensor::ones(&[width])))?;
                model.insert_param(b, adapter(Tensor::zeros(&[width])))?;
            }
            adapters.ssf = true;
        }
        FineTuneStrategy::Ia3(opts) => {
            let cfg = *model.transformer_config().expect("checked family");
            let hidden = cfg.embed_dim * cfg.mlp_ratio;
            for i in 0..cfg.depth {
                let mut vecs = vec![("l_k", cfg.embed_dim), ("l_v", cfg.embed_dim), ("l_ff", hidden)];
                if opts.scale_query {
                    vecs.push(("l_q", cfg.embed_dim));
                }
                for (n, w) in vecs {
                    model.insert_param(format!("ia3.blocks.{i}.{n}"), adapter(Tensor::ones(&[w])))?;
                }
            }
            adapters.ia3 = Some(opts);
        }
        FineTuneStrategy::Oft(opts) => {
            let cfg = *model.transformer_config().expect("checked family");
            let d = cfg.embed_dim;
            if opts.blocks == 0 || d % opts.blocks != 0 || d / opts.blocks < 2 {
                return Err(PeftError::Option(format!("{} blocks cannot tile width {d}", opts.blocks)));
            }
            let np = skew_params(d / opts.blocks);
            for i in 0..cfg.depth {
                for proj in ["q", "k", "v", "o"] {
                    model.insert_param(oft_name(i, proj), adapter(Tensor::zeros(&[opts.blocks, np])))?;
                }
            }
            adapters.oft = Some(opts);
        }
        _ => {}
    }
    model.set_adapters(adapters);
    Ok(model)
}

fn model_is_bn(name: &str) -> bool {
    name.starts_with("bn") && (name.ends_with(".weight") || name.ends_with(".bias"))
}

pub fn oft_name(block: usize, proj: &str) -> String {
    format!("oft.blocks.{block}.attn.{proj}")
}

/// Parameter counts; buffers are excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamStats {
    pub total: usize,
    pub trainable: usize,
    pub percent: f64,
}

impl fmt::Display for ParamStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({:.2}%)", self.trainable, self.total, self.percent)
    }
}

pub fn param_stats(model: &Model) -> ParamStats {
    let (mut total, mut trainable) = (0, 0);
    for p in model.params().values().filter(|p| p.kind != ParamKind::Buffer) {
        total += p.value.len();
        if p.trainable {
            trainable += p.value.len();
        }
    }
    let percent = if total == 0 { 0.0 } else { 100.0 * trainable as f64 / total as f64 };
    ParamStats { total, trainable, percent }
}
