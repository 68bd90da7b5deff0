//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! key can also be set on the command line (`--set key=value` or
//! `--key value`); later assignments win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use uavtune::augment::AugmentationSpec;
use uavtune::data::{DatasetSpec, SynthConfig};
use uavtune::dsp::FeatureConfig;
use uavtune::models::{Architecture, CompactCnnConfig, Family, PoolKind, SpecTransformerConfig};
use uavtune::peft::{FineTuneStrategy, Ia3Options, OftOptions};
use uavtune::train::{OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("{path} line {line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// A config value with a text form that parses back to itself.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u32, u64, usize, f64, bool, String);

/// `auto` leaves the value to be derived at run time.
impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), T::render)
    }
}

macro_rules! run_config {
    ($($key:ident: $ty:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        /// Every key with its description.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($key), $doc)),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value).map_err(|msg| ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            msg,
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                Ok(())
            }

            /// The config in file syntax; parsing it reproduces `self`.
            pub fn echo(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), self.$key.render());)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "Master seed for synthesis, splits, augmentation, init and shuffling.";
    data_dir: String = "data".into(), "Directory the synth command writes to.";
    manifest: String = String::new(), "Manifest CSV; empty means <data_dir>/manifest.csv.";
    out_dir: String = "runs".into(), "Parent directory of run directories.";
    run_name: String = String::new(), "Run directory name; empty derives one from model, strategy, augs and seed.";

    synth_classes: usize = 8, "Synthetic classes.";
    synth_clips_per_class: usize = 80, "Synthetic clips per class.";
    synth_duration_s: f64 = 2.0, "Synthetic clip length in seconds.";
    synth_f0_base: f64 = 110.0, "Fundamental of class 0 in Hz.";
    synth_f0_step: f64 = 55.0, "Fundamental spacing between classes in Hz.";
    synth_f0_jitter: f64 = 0.01, "Per-clip relative jitter of the fundamental.";
    synth_harmonics: usize = 6, "Harmonics per clip.";
    synth_blade_pass_min: f64 = 6.0, "Lowest blade-pass modulation rate in Hz.";
    synth_blade_pass_max: f64 = 30.0, "Highest blade-pass modulation rate in Hz.";
    synth_am_depth_min: f64 = 0.2, "Lowest modulation depth.";
    synth_am_depth_max: f64 = 0.6, "Highest modulation depth.";
    synth_snr_min: f64 = 5.0, "Lowest signal-to-noise ratio in dB.";
    synth_snr_max: f64 = 20.0, "Highest signal-to-noise ratio in dB.";

    sample_rate: u32 = 16_000, "Feature sample rate; clips are resampled to it.";
    n_fft: usize = 1024, "STFT size.";
    hop: usize = 512, "STFT hop.";
    n_mels: usize = 64, "Mel bands.";
    f_min: f64 = 0.0, "Lowest mel filter edge in Hz.";
    f_max: f64 = 8000.0, "Highest mel filter edge in Hz.";
    log_offset: f64 = 1e-6, "Offset inside the log of mel power.";
    n_frames: Option<usize> = None, "Frames per image; auto uses the longest clip (157 for params).";

    augs: usize = 3, "Augmented copies per training clip.";
    stretch_min: f64 = 0.8, "Lowest time-stretch rate.";
    stretch_max: f64 = 1.25, "Highest time-stretch rate.";
    lambda_min: f64 = 0.3, "Lowest distortion strength.";
    lambda_max: f64 = 0.9, "Highest distortion strength.";

    model: String = "cnn".into(), "Model family: cnn or transformer.";
    n_classes: Option<usize> = None, "Output classes; auto uses the manifest (31 for params).";
    cnn_pool: String = "max".into(), "CNN block pooling: max or avg.";
    cnn_hidden: usize = 128, "CNN hidden fully connected width.";
    cnn_dropout: f64 = 0.5, "CNN dropout before the output layer.";
    transformer_patch: usize = 16, "Transformer patch size.";
    transformer_dim: usize = 64, "Transformer embedding width.";
    transformer_heads: usize = 4, "Attention heads.";
    transformer_depth: usize = 4, "Encoder blocks.";
    transformer_mlp_ratio: usize = 4, "MLP hidden width as a multiple of the embedding.";

    strategy: String = "full".into(), "Fine-tuning strategy: full, classifier_only, batchnorm, ssf, ia3 or oft.";
    ia3_scale_query: bool = false, "IA3 also scales attention queries.";
    oft_blocks: usize = 4, "OFT diagonal blocks per rotated weight.";

    optimizer: String = "auto".into(), "adam, adamw, sgd, or auto (adam for cnn, adamw for transformer).";
    lr: Option<f64> = None, "Initial learning rate; auto is 1e-3.";
    weight_decay: Option<f64> = None, "Weight decay; auto is 0 for adam and sgd, 0.01 for adamw.";
    beta1: f64 = 0.9, "Adam first-moment decay.";
    beta2: f64 = 0.999, "Adam second-moment decay.";
    eps: f64 = 1e-8, "Adam epsilon.";

    batch_size: usize = 8, "Micro-batch size.";
    accumulation_steps: usize = 2, "Micro-batches per optimizer step.";
    max_epochs: usize = 50, "Epoch limit.";
    early_stop_patience: usize = 10, "Epochs without monitored-loss improvement before stopping.";

    split_train: f64 = 0.6, "Train share of the single-run split.";
    split_test: f64 = 0.2, "Test share; the monitored split during training.";
    split_validation: f64 = 0.1, "Validation share.";
    split_inference: f64 = 0.1, "Inference share.";
    folds: usize = 5, "Folds for the kfold command.";
    parallel_folds: usize = 1, "Folds trained concurrently.";
}

/// Normalizes `--some-key` style names to config keys.
pub fn key_name(flag: &str) -> String {
    flag.replace('-', "_")
}

pub fn is_key(name: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == name)
}

impl RunConfig {
    /// Applies a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: String| ConfigError::Syntax { path: origin.into(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected key = value".into()))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(syntax(format!("duplicate key {k:?}")));
            }
            self.set(k, v).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override {kv:?} is not key=value")))?;
        self.set(&key_name(k.trim()), v)
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.manifest.is_empty() {
            Path::new(&self.data_dir).join("manifest.csv")
        } else {
            PathBuf::from(&self.manifest)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        let name = if self.run_name.is_empty() {
            format!("{}_{}_k{}_s{}", self.model, self.strategy, self.augs, self.seed)
        } else {
            self.run_name.clone()
        };
        Path::new(&self.out_dir).join(name)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_classes: self.synth_classes,
            clips_per_class: self.synth_clips_per_class,
            duration_s: self.synth_duration_s,
            sample_rate: self.sample_rate,
            f0_base: self.synth_f0_base,
            f0_step: self.synth_f0_step,
            f0_jitter: self.synth_f0_jitter,
            harmonics: self.synth_harmonics,
            blade_pass_hz: (self.synth_blade_pass_min, self.synth_blade_pass_max),
            am_depth: (self.synth_am_depth_min, self.synth_am_depth_max),
            snr_db: (self.synth_snr_min, self.synth_snr_max),
            seed: self.seed,
        }
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop: self.hop,
            n_mels: self.n_mels,
            f_min: self.f_min,
            f_max: self.f_max,
            log_offset: self.log_offset,
        }
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            stretch_rate_range: (self.stretch_min, self.stretch_max),
            distortion_lambda_range: (self.lambda_min, self.lambda_max),
        }
    }

    /// Requires `n_frames` to be resolved.
    pub fn dataset_spec(&self) -> Result<DatasetSpec, ConfigError> {
        let n_frames = self.n_frames.ok_or_else(|| ConfigError::Invalid("n_frames is unresolved".into()))?;
        Ok(DatasetSpec { features: self.features(), n_frames, augment: self.augmentation(), aug_seed: self.seed })
    }

    pub fn family(&self) -> Result<Family, ConfigError> {
        match self.model.as_str() {
            "cnn" => Ok(Family::Cnn),
            "transformer" => Ok(Family::Transformer),
            other => Err(ConfigError::Invalid(format!("model must be cnn or transformer, got {other:?}"))),
        }
    }

    /// Architecture for `family`; requires `n_classes` and, for
    /// transformers, `n_frames` to be resolved.
    pub fn architecture_for(&self, family: Family) -> Result<Architecture, ConfigError> {
        let n_classes = self.n_classes.ok_or_else(|| ConfigError::Invalid("n_classes is unresolved".into()))?;
        Ok(match family {
            Family::Cnn => {
                let pool_kind = match self.cnn_pool.as_str() {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    other => return Err(ConfigError::Invalid(format!("cnn_pool must be max or avg, got {other:?}"))),
                };
                Architecture::Cnn(CompactCnnConfig {
                    n_mels: self.n_mels,
                    pool_kind,
                    hidden_fc: self.cnn_hidden,
                    dropout_p: self.cnn_dropout,
                    n_classes,
                    ..CompactCnnConfig::default()
                })
            }
            Family::Transformer => Architecture::Transformer(SpecTransformerConfig {
                n_mels: self.n_mels,
                n_frames: self.n_frames.ok_or_else(|| ConfigError::Invalid("n_frames is unresolved".into()))?,
                patch: self.transformer_patch,
                embed_dim: self.transformer_dim,
                heads: self.transformer_heads,
                depth: self.transformer_depth,
                mlp_ratio: self.transformer_mlp_ratio,
                n_classes,
            }),
        })
    }

    pub fn architecture(&self) -> Result<Architecture, ConfigError> {
        self.architecture_for(self.family()?)
    }

    /// The configured strategy with its adapter options.
    pub fn strategy(&self) -> Result<FineTuneStrategy, ConfigError> {
        let s = FineTuneStrategy::from_str(&self.strategy).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(match s {
            FineTuneStrategy::Ia3(_) => FineTuneStrategy::Ia3(Ia3Options { scale_query: self.ia3_scale_query }),
            FineTuneStrategy::Oft(_) => FineTuneStrategy::Oft(OftOptions { blocks: self.oft_blocks }),
            other => other,
        })
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig, ConfigError> {
        let base = match self.optimizer.as_str() {
            "auto" => OptimizerConfig::for_family(self.family()?),
            "adam" => OptimizerConfig::adam(),
            "adamw" => OptimizerConfig::adamw(),
            "sgd" => OptimizerConfig::sgd(1e-3),
            other => return Err(ConfigError::Invalid(format!("unknown optimizer {other:?}"))),
        };
        let cfg = OptimizerConfig {
            lr: self.lr.unwrap_or(base.lr),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..base
        };
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.weight_decay < 0.0 {
            return Err(ConfigError::Invalid("lr must be positive and weight_decay non-negative".into()));
        }
        if cfg.kind != OptimizerKind::Sgd && (!(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2)) {
            return Err(ConfigError::Invalid("betas must lie in [0, 1)".into()));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            accumulation_steps: self.accumulation_steps,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            seed: self.seed,
        }
    }

    pub fn ratios(&self) -> [f64; 4] {
        [self.split_train, self.split_test, self.split_validation, self.split_inference]
    }

    /// Fills auto values that do not need data and resolves the
    /// optimizer, so the echo is self-contained.
    pub fn resolve_optimizer(&mut self) -> Result<(), ConfigError> {
        let o = self.optimizer_config()?;
        self.optimizer = match o.kind {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
        .into();
        self.lr = Some(o.lr);
        self.weight_decay = Some(o.weight_decay);
        Ok(())
    }
}

/// Documented list of keys with defaults, in file syntax.
pub fn documented_defaults() -> String {
    let d = RunConfig::default().echo();
    let mut s = String::new();
    for ((_, doc), line) in KEYS.iter().zip(d.lines()) {
        let _ = writeln!(s, "# {doc}\n{line}");
    }
    s
}
