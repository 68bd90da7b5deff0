//! Aggregation and table formatting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use uavtune::train::{confusion_matrix, EpochRecord};

use crate::config::RunConfig;
use crate::CliError;

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// `mean% ± std%` of values already in percent.
pub fn format_pm(percents: &[f64]) -> String {
    format!("{:.2}% ± {:.2}%", mean(percents), sample_std(percents))
}

/// Outcome of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Best monitored (validation) accuracy, as a fraction.
    pub accuracy: f64,
    pub f1: f64,
    pub loss: f64,
    pub train_seconds: f64,
    pub trainable_percent: f64,
    pub inference_accuracy: f64,
    pub inference_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSummary {
    pub folds: Vec<FoldResult>,
}

impl FoldSummary {
    fn column(&self, f: impl Fn(&FoldResult) -> f64) -> Vec<f64> {
        self.folds.iter().map(f).collect()
    }

    pub fn accuracy_pm(&self) -> String {
        format_pm(&self.column(|r| 100.0 * r.accuracy))
    }

    pub fn f1_pm(&self) -> String {
        format_pm(&self.column(|r| 100.0 * r.f1))
    }

    pub fn inference_pm(&self) -> String {
        format_pm(&self.column(|r| 100.0 * r.inference_accuracy))
    }

    /// Per-fold rows followed by mean and sample-std rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("fold,accuracy,f1,loss,train_seconds,trainable_percent,inference_accuracy,inference_f1\n");
        let row = |s: &mut String, name: &str, v: [f64; 7]| {
            let _ = writeln!(s, "{name},{:.6},{:.6},{:.6},{:.3},{:.4},{:.6},{:.6}", v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
        };
        let cols = |r: &FoldResult| {
            [r.accuracy, r.f1, r.loss, r.train_seconds, r.trainable_percent, r.inference_accuracy, r.inference_f1]
        };
        for r in &self.folds {
            row(&mut s, &r.fold.to_string(), cols(r));
        }
        let by_col: Vec<Vec<f64>> = (0..7).map(|i| self.column(|r| cols(r)[i])).collect();
        row(&mut s, "mean", std::array::from_fn(|i| mean(&by_col[i])));
        row(&mut s, "std", std::array::from_fn(|i| sample_std(&by_col[i])));
        s
    }
}

/// Confusion matrix as CSV with class names on both axes (rows: truth).
pub fn confusion_csv(matrix: &[Vec<usize>], classes: &[String]) -> String {
    let mut s = String::from("true\\pred");
    for c in classes {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (c, row) in classes.iter().zip(matrix) {
        s.push_str(c);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Directories holding `metrics.jsonl`, searched depth-first in name order.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.join("metrics.jsonl").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subs.sort();
    let mut out = Vec::new();
    for s in subs {
        out.extend(find_runs(&s)?);
    }
    Ok(out)
}

/// What a finished run directory records.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub records: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let config = RunConfig::from_file(&dir.join("config.txt"))?;
        let text = std::fs::read_to_string(dir.join("metrics.jsonl"))?;
        let records = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}/metrics.jsonl line {}: {e}", dir.display(), i + 1)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { dir: dir.to_path_buf(), config, records })
    }

    pub fn row(&self, split: &str) -> Result<&EpochRecord, CliError> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split)
            .ok_or_else(|| CliError::Data(format!("{}: no {split} row in metrics.jsonl", self.dir.display())))
    }
}

/// Recomputes the inference confusion matrix from `predictions.csv`.
pub fn confusion_from_predictions(dir: &Path) -> Result<String, CliError> {
    let classes: Vec<String> = std::fs::read_to_string(dir.join("classes.txt"))?.lines().map(str::to_string).collect();
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let text = std::fs::read_to_string(dir.join("predictions.csv"))?;
    let (mut labels, mut preds) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Data(format!("{}/predictions.csv line {}: malformed", dir.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        if f[0] != "inference" {
            continue;
        }
        labels.push(*index.get(f[2]).ok_or_else(bad)?);
        preds.push(*index.get(f[3]).ok_or_else(bad)?);
    }
    Ok(confusion_csv(&confusion_matrix(&preds, &labels, classes.len()), &classes))
}

pub const SUMMARY_HEADER: &str = "model,strategy,augs,acc_mean,acc_std,f1_mean,f1_std,time_mean_s,trainable_pct";

/// One row per (model, strategy, augs) over the given runs, in first-seen
/// order; accuracy and F1 are validation percentages of the kept
/// checkpoint, time is the fit wall clock.
pub fn summarize(runs: &[RunRecord]) -> Result<Vec<SummaryRow>, CliError> {
    let mut groups: Vec<((String, String, usize), Vec<&RunRecord>)> = Vec::new();
    for r in runs {
        let key = (r.config.model.clone(), r.config.strategy.clone(), r.config.augs);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((model, strategy, augs), rs)| {
            let mut acc = Vec::new();
            let mut f1 = Vec::new();
            let mut time = Vec::new();
            let mut pct = Vec::new();
            for r in rs {
                let v = r.row("validation")?;
                acc.push(100.0 * v.accuracy);
                f1.push(100.0 * v.f1);
                pct.push(v.trainable_percent);
                time.push(r.row("best")?.seconds);
            }
            Ok(SummaryRow { model, strategy, augs, acc, f1, time_mean_s: mean(&time), trainable_pct: mean(&pct) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub strategy: String,
    pub augs: usize,
    /// Per-run percentages.
    pub acc: Vec<f64>,
    pub f1: Vec<f64>,
    pub time_mean_s: f64,
    pub trainable_pct: f64,
}

impl SummaryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.3},{:.4}",
            self.model,
            self.strategy,
            self.augs,
            mean(&self.acc),
            sample_std(&self.acc),
            mean(&self.f1),
            sample_std(&self.f1),
            self.time_mean_s,
            self.trainable_pct
        )
    }
}
