//! Command implementations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use uavtune::data::{
    inflate, kfold_plan, load_waveforms, originals, parse_manifest, stratified_split, synth_generate, FeatureBank, Item,
    Manifest, Split,
};
use uavtune::dsp::Waveform;
use uavtune::models::{save_adapters, save_checkpoint, Family, Model};
use uavtune::peft::{apply_strategy, param_stats, FineTuneStrategy};
use uavtune::seed;
use uavtune::train::{confusion_matrix, evaluate, fit, Dataset, EpochRecord, Evaluation};

use crate::config::{ConfigError, RunConfig};
use crate::report::{self, FoldResult, FoldSummary, RunRecord, SummaryRow};
use crate::CliError;

/// Frame count assumed by `params` when none is configured.
pub const PARAMS_FRAMES: usize = 157;
/// Class count assumed by `params` when none is configured.
pub const PARAMS_CLASSES: usize = 31;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Config(ConfigError::Invalid(e.to_string()))
}

pub fn synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.data_dir.trim().is_empty() {
        return Err(CliError::Usage("synth needs an output directory (--out or data_dir)".into()));
    }
    let sc = cfg.synth();
    let manifest = synth_generate(&sc, Path::new(&cfg.data_dir))?;
    writeln!(
        out,
        "wrote {} clips ({} classes x {}) and {}",
        sc.n_classes * sc.clips_per_class,
        sc.n_classes,
        sc.clips_per_class,
        manifest.display()
    )?;
    Ok(())
}

/// Checks everything that does not need data, so configuration mistakes
/// fail before any audio is read.
fn validate(cfg: &RunConfig) -> Result<(Family, FineTuneStrategy), CliError> {
    let family = cfg.family()?;
    let strategy = cfg.strategy()?;
    strategy.check(family)?;
    cfg.features().validate().map_err(invalid)?;
    cfg.augmentation().validate().map_err(invalid)?;
    cfg.train_config().validate()?;
    cfg.optimizer_config()?;
    Ok((family, strategy))
}

/// Parsed manifest, all waveforms, and the config with data-derived
/// values filled in.
struct Loaded {
    manifest: Manifest,
    waves: HashMap<u64, Waveform>,
    cfg: RunConfig,
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let manifest = parse_manifest(&cfg.manifest_path())?;
    let clips: Vec<u64> = (0..manifest.len() as u64).collect();
    let waves = load_waveforms(&manifest, &clips, cfg.sample_rate)?;
    let mut cfg = cfg.clone();
    let features = cfg.features();
    if cfg.n_frames.is_none() {
        cfg.n_frames = waves.values().map(|w| features.n_frames(w.len())).max();
    }
    let classes = manifest.classes().len();
    match cfg.n_classes {
        None => cfg.n_classes = Some(classes),
        Some(n) if n != classes => {
            return Err(invalid(format!("n_classes = {n} but the manifest has {classes} classes")));
        }
        _ => {}
    }
    cfg.resolve_optimizer()?;
    // architecture errors (e.g. clips shorter than a patch) are config errors
    cfg.architecture()?;
    Ok(Loaded { manifest, waves, cfg })
}

/// Datasets of one run, before standardization.
struct RunData {
    train: Dataset,
    monitor: Dataset,
    validation: (Dataset, Vec<u64>),
    inference: (Dataset, Vec<u64>),
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub epochs_run: usize,
    pub train_seconds: f64,
    pub trainable_percent: f64,
    pub validation: Evaluation,
    pub inference: Evaluation,
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn json_line(rec: &EpochRecord) -> String {
    serde_json::to_string(rec).expect("records serialize")
}

/// Standardizes with train moments, trains from `init_seed`, evaluates the
/// kept checkpoint and writes the run directory.
fn run_one(cfg: &RunConfig, init_seed: u64, m: &Manifest, mut data: RunData, dir: &Path) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join("config.txt"), &cfg.echo())?;
    let classes = m.classes().join("\n") + "\n";
    write_file(&dir.join("classes.txt"), &classes)?;

    let (mean, std) = data.train.moments();
    for ds in [&mut data.train, &mut data.monitor, &mut data.validation.0, &mut data.inference.0] {
        ds.standardize(mean, std);
    }
    let norm = serde_json::json!({ "mean": mean, "std": std });
    write_file(&dir.join("normalization.json"), &format!("{norm}\n"))?;

    let model = apply_strategy(Model::new(cfg.architecture()?, init_seed)?, cfg.strategy()?)?;
    let mut tc = cfg.train_config();
    tc.seed = init_seed;
    let mut lines = String::new();
    let metrics_path = dir.join("metrics.jsonl");
    let mut sink = std::fs::File::create(&metrics_path)?;
    let mut io_err = None;
    let result = fit(model, &data.train, &data.monitor, cfg.optimizer_config()?, &tc, |rec| {
        let line = json_line(rec);
        if let Err(e) = writeln!(sink, "{line}") {
            io_err.get_or_insert(e);
        }
        lines.push_str(&line);
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let fitted = result?;
    let trainable_percent = param_stats(&fitted.best).percent;
    let best_row = fitted
        .history
        .iter()
        .find(|r| r.epoch == fitted.best_epoch && r.split == "monitor")
        .expect("best epoch was recorded")
        .clone();

    let mut finals = vec![EpochRecord { split: "best".into(), seconds: fitted.train_seconds, ..best_row.clone() }];
    let mut evals = Vec::new();
    for (name, (ds, _)) in [("validation", &data.validation), ("inference", &data.inference)] {
        let t = std::time::Instant::now();
        let ev = evaluate(&fitted.best, ds, cfg.batch_size)?;
        if !ev.loss.is_finite() {
            return Err(CliError::NonFinite(format!("{name} loss")));
        }
        finals.push(EpochRecord {
            split: name.into(),
            loss: ev.loss,
            accuracy: ev.accuracy,
            f1: ev.f1,
            seconds: t.elapsed().as_secs_f64(),
            trainable_percent,
            ..best_row.clone()
        });
        evals.push(ev);
    }
    for rec in &finals {
        writeln!(sink, "{}", json_line(rec))?;
    }
    drop(sink);

    save_checkpoint(&fitted.best, &dir.join("checkpoint.bin"))?;
    if !fitted.best.adapters().is_empty() {
        save_adapters(&fitted.best, &dir.join("adapters.bin"))?;
    }
    let mut preds = String::from("split,clip_id,label,pred\n");
    for ((name, (ds, clips)), ev) in [("validation", &data.validation), ("inference", &data.inference)].into_iter().zip(&evals) {
        for ((c, &y), &p) in clips.iter().zip(ds.labels()).zip(&ev.preds) {
            let _ = writeln!(preds, "{name},{c},{},{}", m.classes()[y], m.classes()[p]);
        }
    }
    write_file(&dir.join("predictions.csv"), &preds)?;
    let inf = &data.inference.0;
    let cm = confusion_matrix(&evals[1].preds, inf.labels(), inf.n_classes());
    write_file(&dir.join("confusion.csv"), &report::confusion_csv(&cm, m.classes()))?;

    let mut evals = evals.into_iter();
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        best_epoch: fitted.best_epoch,
        best_accuracy: fitted.best_accuracy,
        best_loss: fitted.best_loss,
        epochs_run: fitted.epochs_run,
        train_seconds: fitted.train_seconds,
        trainable_percent,
        validation: evals.next().unwrap(),
        inference: evals.next().unwrap(),
    })
}

/// Single run: stratified split, Train and Test inflated by `augs`, Test
/// monitored, Validation and Inference evaluated on the kept checkpoint.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<RunOutcome, CliError> {
    validate(cfg)?;
    let Loaded { manifest: m, waves, cfg } = load(cfg)?;
    let split = stratified_split(&m, cfg.ratios(), cfg.seed)?;
    let spec = cfg.dataset_spec()?;
    let members = |s: Split| split.members(s);
    let train_items = inflate(&members(Split::Train), Split::Train, cfg.augs)?;
    let test_items = inflate(&members(Split::Test), Split::Test, cfg.augs)?;
    let val = members(Split::Validation);
    let inf = members(Split::Inference);
    let mut all: Vec<Item> = train_items.iter().chain(&test_items).copied().collect();
    all.extend(originals(&val));
    all.extend(originals(&inf));
    let bank = FeatureBank::build(&m, &waves, &all, &spec)?;
    let data = RunData {
        train: bank.dataset(&train_items)?,
        monitor: bank.dataset(&test_items)?,
        validation: (bank.dataset(&originals(&val))?, val),
        inference: (bank.dataset(&originals(&inf))?, inf),
    };
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    write_file(&dir.join("split.csv"), &split.report(&m))?;
    let o = run_one(&cfg, cfg.seed, &m, data, &dir)?;
    writeln!(
        out,
        "{} {} augs={}: best epoch {} of {}, validation accuracy {:.2}%, inference accuracy {:.2}%, trainable {:.2}%, {:.1}s -> {}",
        cfg.model,
        cfg.strategy,
        cfg.augs,
        o.best_epoch,
        o.epochs_run,
        100.0 * o.validation.accuracy,
        100.0 * o.inference.accuracy,
        o.trainable_percent,
        o.train_seconds,
        dir.display()
    )?;
    Ok(o)
}

/// k-fold experiment: fixed inference hold-out, each fold trained from a
/// fresh initialization with its validation fold monitored.
pub fn kfold(cfg: &RunConfig, out: &mut dyn Write) -> Result<FoldSummary, CliError> {
    validate(cfg)?;
    if cfg.parallel_folds == 0 {
        return Err(invalid("parallel_folds must be at least 1"));
    }
    let Loaded { manifest: m, waves, cfg } = load(cfg)?;
    let plan = kfold_plan(&m, cfg.folds, cfg.seed)?;
    let spec = cfg.dataset_spec()?;
    let pool: Vec<u64> = plan.folds.iter().flatten().copied().collect();
    let mut all = inflate(&pool, Split::Train, cfg.augs)?;
    all.extend(originals(&plan.inference));
    let bank = FeatureBank::build(&m, &waves, &all, &spec)?;
    let root = cfg.run_dir();
    std::fs::create_dir_all(&root)?;
    write_file(&root.join("config.txt"), &cfg.echo())?;
    write_file(&root.join("plan.csv"), &plan.report(&m))?;

    let run_fold = |i: usize| -> Result<RunOutcome, CliError> {
        let fs = plan.fold(i);
        let val = bank.dataset(&originals(&fs.validation))?;
        let data = RunData {
            train: bank.dataset(&inflate(&fs.train, Split::Train, cfg.augs)?)?,
            monitor: val.clone(),
            validation: (val, fs.validation.clone()),
            inference: (bank.dataset(&originals(&fs.inference))?, fs.inference.clone()),
        };
        run_one(&cfg, seed::derive(cfg.seed, &[i as u64]), &m, data, &root.join(format!("fold{i}")))
    };
    let k = plan.k();
    let workers = cfg.parallel_folds.min(k);
    let outcomes: Vec<RunOutcome> = if workers <= 1 {
        (0..k).map(run_fold).collect::<Result<_, _>>()?
    } else {
        let mut slots: Vec<Option<Result<RunOutcome, CliError>>> = (0..k).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_fold = &run_fold;
                    s.spawn(move || (w..k).step_by(workers).map(|i| (i, run_fold(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("fold worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<_, _>>()?
    };

    let summary = FoldSummary {
        folds: outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| FoldResult {
                fold: i,
                accuracy: o.best_accuracy,
                f1: o.validation.f1,
                loss: o.best_loss,
                train_seconds: o.train_seconds,
                trainable_percent: o.trainable_percent,
                inference_accuracy: o.inference.accuracy,
                inference_f1: o.inference.f1,
            })
            .collect(),
    };
    write_file(&root.join("summary.csv"), &summary.csv())?;
    writeln!(out, "# {k}-fold, mean ± sample std (n-1) over folds")?;
    writeln!(out, "model,strategy,augs,validation_accuracy,validation_f1,inference_accuracy")?;
    writeln!(
        out,
        "{},{},{},{},{},{}",
        cfg.model,
        cfg.strategy,
        cfg.augs,
        summary.accuracy_pm(),
        summary.f1_pm(),
        summary.inference_pm()
    )?;
    Ok(summary)
}

/// One line of the `params` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsRow {
    pub strategy: &'static str,
    /// `(trainable, total, percent)` per family; `None` where inapplicable.
    pub cnn: Option<(usize, usize, f64)>,
    pub transformer: Option<(usize, usize, f64)>,
}

pub fn params_table(cfg: &RunConfig) -> Result<Vec<ParamsRow>, CliError> {
    let mut cfg = cfg.clone();
    cfg.n_classes.get_or_insert(PARAMS_CLASSES);
    cfg.n_frames.get_or_insert(PARAMS_FRAMES);
    let mut rows = Vec::new();
    for s in FineTuneStrategy::ALL {
        cfg.strategy = s.name().into();
        let strategy = cfg.strategy()?;
        let cell = |family: Family| -> Result<_, CliError> {
            if strategy.check(family).is_err() {
                return Ok(None);
            }
            let model = apply_strategy(Model::new(cfg.architecture_for(family)?, cfg.seed)?, strategy)?;
            let st = param_stats(&model);
            Ok(Some((st.trainable, st.total, st.percent)))
        };
        rows.push(ParamsRow { strategy: s.name(), cnn: cell(Family::Cnn)?, transformer: cell(Family::Transformer)? });
    }
    Ok(rows)
}

pub fn params(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = params_table(cfg)?;
    let cell = |c: Option<(usize, usize, f64)>| match c {
        Some((t, n, p)) => format!("{t}/{n} ({p:.2}%)"),
        None => "-".into(),
    };
    writeln!(out, "{:<16} {:<26} {:<26}", "strategy", "cnn", "transformer")?;
    for r in rows {
        writeln!(out, "{:<16} {:<26} {:<26}", r.strategy, cell(r.cnn), cell(r.transformer))?;
    }
    Ok(())
}

/// Summarizes run directories into one CSV and refreshes each run's
/// inference confusion matrix from its predictions.
pub fn report(dirs: &[PathBuf], out_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let mut runs = Vec::new();
    for d in dirs {
        for r in report::find_runs(d)? {
            runs.push(RunRecord::load(&r)?);
        }
    }
    if runs.is_empty() {
        return Err(CliError::Usage("no run directories found".into()));
    }
    for r in &runs {
        if r.dir.join("predictions.csv").is_file() {
            write_file(&r.dir.join("confusion.csv"), &report::confusion_from_predictions(&r.dir)?)?;
        }
    }
    let rows: Vec<SummaryRow> = report::summarize(&runs)?;
    let mut csv = format!("{}\n", report::SUMMARY_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write_file(out_path, &csv)?;
    writeln!(out, "# {} runs; std is the sample standard deviation (n-1) over runs, 0 for a single run", runs.len())?;
    writeln!(out, "model,strategy,augs,accuracy,f1,time_mean_s,trainable_pct")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.1},{:.2}",
            r.model,
            r.strategy,
            r.augs,
            report::format_pm(&r.acc),
            report::format_pm(&r.f1),
            r.time_mean_s,
            r.trainable_pct
        )?;
    }
    writeln!(out, "wrote {}", out_path.display())?;
    Ok(())
}
