//! Clip loading and featurization into in-memory datasets.

use std::collections::HashMap;

use super::{DataError, Item, Manifest, Result};
use crate::augment::{augment_one, draw_params, AugmentationPlan, AugmentationSpec};
use crate::dsp::{ingest_wav, FeatureConfig, MelExtractor, Waveform};
use crate::train::Dataset;

/// How items become feature images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub features: FeatureConfig,
    /// Every image is padded or truncated to this many frames.
    pub n_frames: usize,
    pub augment: AugmentationSpec,
    pub aug_seed: u64,
}

fn workers(n: usize) -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1))
}

/// Maps `f` over `items` on scoped threads, preserving order.
fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = items.len().div_ceil(workers(items.len()));
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Reads and resamples the given clips.
pub fn load_waveforms(m: &Manifest, clips: &[u64], sample_rate: u32) -> Result<HashMap<u64, Waveform>> {
    let waves = par_map(clips, |&c| Ok((c, ingest_wav(&m.entries()[c as usize].path, sample_rate)?)))?;
    Ok(waves.into_iter().collect())
}

/// Featurizes items (augmenting where `aug_index` is set) into a dataset
/// labeled by the manifest's class index.
pub fn build_dataset(m: &Manifest, waves: &HashMap<u64, Waveform>, items: &[Item], spec: &DatasetSpec) -> Result<Dataset> {
    let extractor = MelExtractor::new(spec.features)?;
    let plan = AugmentationPlan { k: 0, global_seed: spec.aug_seed };
    let feats = par_map(items, |it| {
        let w = waves.get(&it.source).unwrap_or_else(|| panic!("clip {} was not loaded", it.source));
        let mel = match it.aug_index {
            None => extractor.log_mel(w)?,
            Some(i) => {
                let p = draw_params(&plan, &spec.augment, it.source, i as u64);
                extractor.log_mel(&augment_one(w, p)?)?
            }
        };
        Ok(mel.fit_frames(spec.n_frames).values)
    })?;
    let mut ds = Dataset::new(spec.features.n_mels, spec.n_frames, m.classes().len());
    for (it, f) in items.iter().zip(feats) {
        ds.push(&f, m.label_of(it.source))?;
    }
    Ok(ds)
}

/// Features computed once per distinct item and reassembled into
/// per-split datasets, so folds sharing clips share the work.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    index: HashMap<Item, usize>,
    data: Dataset,
}

impl FeatureBank {
    pub fn build(m: &Manifest, waves: &HashMap<u64, Waveform>, items: &[Item], spec: &DatasetSpec) -> Result<Self> {
        let mut unique: Vec<Item> = items.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let data = build_dataset(m, waves, &unique, spec)?;
        let index = unique.into_iter().enumerate().map(|(i, it)| (it, i)).collect();
        Ok(Self { index, data })
    }

    pub fn contains(&self, item: &Item) -> bool {
        self.index.contains_key(item)
    }

    /// Dataset of `items` in the given order.
    pub fn dataset(&self, items: &[Item]) -> Result<Dataset> {
        let mut ds = Dataset::new(self.data.n_mels(), self.data.n_frames(), self.data.n_classes());
        for it in items {
            let &i = self.index.get(it).ok_or_else(|| {
                DataError::Manifest { path: "<feature bank>".into(), msg: format!("item {it:?} was not featurized") }
            })?;
            ds.push(self.data.features(i), self.data.labels()[i])?;
        }
        Ok(ds)
    }
}
