//! Command-line driver: synthesis, single runs, k-fold experiments,
//! parameter accounting and reports.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;
use uavtune::data::DataError;
use uavtune::models::ModelError;
use uavtune::peft::PeftError;
use uavtune::train::TrainError;

use config::{is_key, key_name, ConfigError, RunConfig, KEYS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage or config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::NonFinite(_) => 3,
        }
    }
}

impl From<PeftError> for CliError {
    fn from(e: PeftError) -> Self {
        match e {
            PeftError::Model(m) => m.into(),
            PeftError::Tensor(t) => ModelError::Tensor(t).into(),
            other => CliError::Config(ConfigError::Invalid(other.to_string())),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(m) => CliError::NonFinite(m),
            TrainError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            ModelError::Tensor(t) => TrainError::from(t).into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Train(t) => t.into(),
            DataError::Ratios(_) | DataError::Folds(_) | DataError::Synth(_) => {
                CliError::Config(ConfigError::Invalid(e.to_string()))
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "uavtune", version, about = "UAV acoustic classification experiments")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Any key may also be given as `--key value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently by `kfold`; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    parallel_folds: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth {
        /// Output directory (overrides data_dir).
        #[arg(long)]
        out: Option<String>,
    },
    /// Train one model on a stratified split.
    Train,
    /// Run the k-fold experiment.
    Kfold,
    /// Print trainable parameter counts for every model and strategy.
    Params,
    /// Summarize finished run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Summary CSV path.
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
    },
    /// Print every config key with its default and description.
    Keys,
}

/// Rewrites `--some-key value` and `--some-key=value` for config keys into
/// `--set some_key=value`. `--seed` and `--parallel-folds` stay as they are.
fn expand_key_flags(args: Vec<OsString>) -> Vec<OsString> {
    // booleans accept "true" but not "1"; strings accept both
    let is_bool = |k: &str| RunConfig::default().set(k, "true").is_ok() && RunConfig::default().set(k, "1").is_err();
    let bools: Vec<&str> = KEYS.iter().map(|(k, _)| *k).filter(|k| is_bool(k)).collect();
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(s) = a.to_str().and_then(|s| s.strip_prefix("--")) else {
            out.push(a);
            continue;
        };
        if s.is_empty() {
            out.push(a);
            out.extend(it);
            break;
        }
        let (name, inline) = match s.split_once('=') {
            Some((n, v)) => (key_name(n), Some(v.to_string())),
            None => (key_name(s), None),
        };
        if !is_key(&name) || name == "seed" || name == "parallel_folds" {
            out.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => {
                let next_is_value = it.peek().and_then(|n| n.to_str()).is_some_and(|n| !n.starts_with("--"));
                if next_is_value {
                    it.next().unwrap().to_string_lossy().into_owned()
                } else if bools.contains(&name.as_str()) {
                    "true".into()
                } else {
                    String::new()
                }
            }
        };
        out.push("--set".into());
        out.push(format!("{name}={value}").into());
    }
    out
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.parallel_folds {
        cfg.parallel_folds = n;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth { out: dir } => {
            if let Some(d) = dir {
                cfg.data_dir = d;
            }
            commands::synth(&cfg, out)
        }
        Command::Train => commands::train(&cfg, out).map(|_| ()),
        Command::Kfold => commands::kfold(&cfg, out).map(|_| ()),
        Command::Params => commands::params(&cfg, out),
        Command::Report { dirs, out: path } => commands::report(&dirs, &path, out),
        Command::Keys => {
            out.write_all(config::documented_defaults().as_bytes())?;
            Ok(())
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = expand_key_flags(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
