//! Manifests, stratified splits, the k-fold plan, training-set inflation and
//! a synthetic rotor-audio generator.

mod pipeline;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seed;

pub use pipeline::{build_dataset, load_waveforms, DatasetSpec, FeatureBank};
pub use synth::{synth_clip, synth_generate, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("manifest line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("split ratios sum to {0}, expected 1")]
    Ratios(f64),
    #[error("class {class:?} has {count} entries, need at least {min}")]
    ClassTooSmall { class: String, count: usize, min: usize },
    #[error("k must be at least 2, got {0}")]
    Folds(usize),
    #[error("refusing to augment clip {clip_id} from the clean {split} split")]
    CleanSplit { clip_id: u64, split: Split },
    #[error("invalid synth config: {0}")]
    Synth(String),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Row index in the manifest.
    pub clip_id: u64,
    pub path: PathBuf,
    pub label: String,
    /// Extra columns, in header order.
    pub meta: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    classes: Vec<String>,
}

impl Manifest {
    /// Builds a manifest from entries; classes are sorted for a stable
    /// label index.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(DataError::Manifest { path: "<memory>".into(), msg: "no entries".into() });
        }
        let mut classes: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
        classes.sort();
        classes.dedup();
        Ok(Self { entries, classes })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    /// Label index of a clip.
    pub fn label_of(&self, clip_id: u64) -> usize {
        self.class_index(&self.entries[clip_id as usize].label).expect("label from this manifest")
    }

    /// Clip ids grouped by class index.
    pub fn by_class(&self) -> Vec<Vec<u64>> {
        let mut g = vec![Vec::new(); self.classes.len()];
        for e in &self.entries {
            g[self.class_index(&e.label).unwrap()].push(e.clip_id);
        }
        g
    }
}

/// Parses a CSV manifest with a header containing `path` and `label`.
/// Relative paths resolve against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Manifest { path: path.display().to_string(), msg: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest_str(&text, base).map_err(|e| match e {
        DataError::Manifest { msg, .. } => DataError::Manifest { path: path.display().to_string(), msg },
        other => other,
    })
}

pub fn parse_manifest_str(text: &str, base: &Path) -> Result<Manifest> {
    let no_entries = || DataError::Manifest { path: "<memory>".into(), msg: "no entries".into() };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(text.as_bytes());
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(r) => r.map_err(|e| DataError::Line { line: 1, msg: e.to_string() })?,
        None => return Err(no_entries()),
    };
    let cols: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::Line { line: 1, msg: format!("header lacks a {name:?} column") })
    };
    let (pi, li) = (find("path")?, find("label")?);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for rec in rows {
        let rec = rec.map_err(|e| DataError::Line { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() != cols.len() {
            return Err(DataError::Line { line, msg: format!("expected {} columns, found {}", cols.len(), rec.len()) });
        }
        let p = rec[pi].trim();
        let label = rec[li].trim();
        if p.is_empty() {
            return Err(DataError::Line { line, msg: "empty path".into() });
        }
        if label.is_empty() {
            return Err(DataError::Line { line, msg: "empty label".into() });
        }
        if !seen.insert(p.to_string()) {
            return Err(DataError::Line { line, msg: format!("duplicate path {p}") });
        }
        let meta = cols
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != pi && i != li)
            .map(|(i, c)| (c.clone(), rec[i].trim().to_string()))
            .collect();
        entries.push(ManifestEntry { clip_id: entries.len() as u64, path: base.join(p), label: label.to_string(), meta });
    }
    if entries.is_empty() {
        return Err(no_entries());
    }
    Manifest::from_entries(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    Validation,
    Inference,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Test, Split::Validation, Split::Inference];

    /// Splits that may carry augmented copies.
    pub fn augmentable(self) -> bool {
        matches!(self, Split::Train | Split::Test)
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
            Split::Inference => "inference",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counts per part by largest remainder; ties favor earlier parts.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // guard against 0.6 * 100 = 59.999...
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn shuffled(ids: &[u64], seed: u64, keys: &[u64]) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.shuffle(&mut seed::stream(seed, keys));
    v
}

/// Clip-to-split map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn get(&self, clip_id: u64) -> Option<Split> {
        self.map.get(&clip_id).copied()
    }

    pub fn members(&self, split: Split) -> Vec<u64> {
        self.map.iter().filter(|(_, &s)| s == split).map(|(&c, _)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `clip_id,label,split` lines for audit.
    pub fn report(&self, m: &Manifest) -> String {
        let mut s = String::from("clip_id,label,split\n");
        for (&c, sp) in &self.map {
            let _ = writeln!(s, "{c},{},{sp}", m.entries[c as usize].label);
        }
        s
    }
}

pub const DEFAULT_RATIOS: [f64; 4] = [0.6, 0.2, 0.1, 0.1];

/// Per-class stratified split into train / test / validation / inference.
pub fn stratified_split(m: &Manifest, ratios: [f64; 4], seed: u64) -> Result<SplitAssignment> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(DataError::Ratios(sum));
    }
    let mut map = BTreeMap::new();
    for (ci, ids) in m.by_class().iter().enumerate() {
        if ids.len() < 10 {
            return Err(DataError::ClassTooSmall { class: m.classes[ci].clone(), count: ids.len(), min: 10 });
        }
        let ids = shuffled(ids, seed, &[0x5B, ci as u64]);
        let counts = largest_remainder(ids.len(), &ratios);
        let mut it = ids.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for c in it.by_ref().take(n) {
                map.insert(c, split);
            }
        }
    }
    Ok(SplitAssignment { map })
}

/// Fixed inference hold-out plus `k` disjoint validation folds over the
/// remaining pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KFoldPlan {
    pub inference: Vec<u64>,
    pub folds: Vec<Vec<u64>>,
}

/// Clip ids of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub inference: Vec<u64>,
}

impl KFoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, i: usize) -> FoldSplit {
        let mut train: Vec<u64> = self.folds.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        train.sort_unstable();
        FoldSplit { train, validation: self.folds[i].clone(), inference: self.inference.clone() }
    }

    /// `clip_id,label,assignment` lines; assignment is `inference` or
    /// `fold<i>`.
    pub fn report(&self, m: &Manifest) -> String {
        let mut rows: Vec<(u64, String)> = self.inference.iter().map(|&c| (c, "inference".to_string())).collect();
        for (i, f) in self.folds.iter().enumerate() {
            rows.extend(f.iter().map(|&c| (c, format!("fold{i}"))));
        }
        rows.sort();
        let mut s = String::from("clip_id,label,assignment\n");
        for (c, a) in rows {
            let _ = writeln!(s, "{c},{},{a}", m.entries[c as usize].label);
        }
        s
    }
}

pub const INFERENCE_FRACTION: f64 = 0.1;

pub fn kfold_plan(m: &Manifest, k: usize, seed: u64) -> Result<KFoldPlan> {
    if k < 2 {
        return Err(DataError::Folds(k));
    }
    let mut inference = Vec::new();
    let mut folds = vec![Vec::new(); k];
    for (ci, ids) in m.by_class().iter().enumerate() {
        let counts = largest_remainder(ids.len(), &[INFERENCE_FRACTION, 1.0 - INFERENCE_FRACTION]);
        if counts[0] == 0 || counts[1] < k {
            return Err(DataError::ClassTooSmall { class: m.classes[ci].clone(), count: ids.len(), min: k + 1 });
        }
        let ids = shuffled(ids, seed, &[0xF0, ci as u64]);
        inference.extend_from_slice(&ids[..counts[0]]);
        let pool = &ids[counts[0]..];
        let (base, extra) = (pool.len() / k, pool.len() % k);
        // remainder items go to folds rotated by class so fold sizes stay level
        let mut sizes = vec![base; k];
        for j in 0..extra {
            sizes[(ci + j) % k] += 1;
        }
        let mut it = pool.iter().copied();
        for (f, n) in folds.iter_mut().zip(sizes) {
            f.extend(it.by_ref().take(n));
        }
    }
    inference.sort_unstable();
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(KFoldPlan { inference, folds })
}

/// One training item: an original clip or one of its augmented copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Item {
    pub source: u64,
    pub aug_index: Option<u32>,
}

/// Originals plus `k` augmented copies of each clip from an augmentable
/// split.
pub fn inflate(clips: &[u64], split: Split, k: usize) -> Result<Vec<Item>> {
    if !split.augmentable() && k > 0 {
        return Err(DataError::CleanSplit { clip_id: clips.first().copied().unwrap_or(0), split });
    }
    let mut out = Vec::with_capacity(clips.len() * (1 + k));
    for &c in clips {
        out.push(Item { source: c, aug_index: None });
        out.extend((0..k as u32).map(|i| Item { source: c, aug_index: Some(i) }));
    }
    Ok(out)
}

/// Items for a clean split: originals only.
pub fn originals(clips: &[u64]) -> Vec<Item> {
    clips.iter().map(|&c| Item { source: c, aug_index: None }).collect()
}
