//! Synthetic rotor audio: a harmonic stack on a per-class fundamental,
//! amplitude-modulated at a blade-pass rate, plus white noise.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, Result};
use crate::dsp::{write_wav, Waveform};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Fundamental of class `c` is `f0_base + c · f0_step` Hz.
    pub f0_base: f64,
    pub f0_step: f64,
    /// Per-clip relative jitter of the fundamental.
    pub f0_jitter: f64,
    pub harmonics: usize,
    pub blade_pass_hz: (f64, f64),
    pub am_depth: (f64, f64),
    pub snr_db: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            clips_per_class: 80,
            duration_s: 2.0,
            sample_rate: 16_000,
            f0_base: 110.0,
            f0_step: 55.0,
            f0_jitter: 0.01,
            harmonics: 6,
            blade_pass_hz: (6.0, 30.0),
            am_depth: (0.2, 0.6),
            snr_db: (5.0, 20.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Full-scale layout: 31 classes × 100 clips × 5 s.
    pub fn full_scale() -> Self {
        Self {
            n_classes: 31,
            clips_per_class: 100,
            duration_s: 5.0,
            f0_base: 100.0,
            f0_step: 40.0,
            f0_jitter: 0.005,
            ..Self::default()
        }
    }

    pub fn f0(&self, class: usize) -> f64 {
        self.f0_base + class as f64 * self.f0_step
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("uav_{class:02}")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Synth(m.into()));
        if self.n_classes < 2 || self.clips_per_class == 0 || self.harmonics == 0 {
            return bad("need at least 2 classes, 1 clip and 1 harmonic");
        }
        if self.sample_rate == 0 || self.n_samples() == 0 {
            return bad("empty clips");
        }
        // jittered fundamentals of neighboring classes stay 20 Hz apart
        let gap = self.f0_step - self.f0_jitter * (2.0 * self.f0(self.n_classes - 1));
        if self.f0_base <= 0.0 || gap < 20.0 {
            return bad("class fundamentals must be at least 20 Hz apart");
        }
        let top = self.f0(self.n_classes - 1) * (1.0 + self.f0_jitter) * self.harmonics as f64;
        if top >= self.sample_rate as f64 / 2.0 {
            return bad("highest harmonic exceeds Nyquist");
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !ordered(self.blade_pass_hz) || !ordered(self.am_depth) || !ordered(self.snr_db) {
            return bad("ranges must be ordered");
        }
        if self.am_depth.0 < 0.0 || self.am_depth.1 > 1.0 {
            return bad("modulation depth must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One clip of class `class`; a pure function of `(cfg.seed, class, index)`.
pub fn synth_clip(cfg: &SynthConfig, class: usize, index: usize) -> Result<Waveform> {
    let mut rng = seed::stream(cfg.seed, &[0x57, class as u64, index as u64]);
    let sr = cfg.sample_rate as f64;
    let f0 = cfg.f0(class) * (1.0 + cfg.f0_jitter * rng.random_range(-1.0..=1.0));
    let amps: Vec<f64> = (1..=cfg.harmonics).map(|h| (1.0 / h as f64) * rng.random_range(0.8..1.2)).collect();
    let phases: Vec<f64> = (0..cfg.harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let f_bp = rng.random_range(cfg.blade_pass_hz.0..=cfg.blade_pass_hz.1);
    let depth = rng.random_range(cfg.am_depth.0..=cfg.am_depth.1);
    let bp_phase = rng.random_range(0.0..2.0 * PI);
    let snr = rng.random_range(cfg.snr_db.0..=cfg.snr_db.1);

    let n = cfg.n_samples();
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * (2.0 * PI * (h + 1) as f64 * f0 * t + p).sin())
                .sum();
            tone * (1.0 + depth * (2.0 * PI * f_bp * t + bp_phase).sin())
        })
        .collect();
    let power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_std = (power / 10f64.powf(snr / 10.0)).sqrt();
    for v in &mut x {
        *v += noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    Ok(Waveform::new(x.into_iter().map(|v| (v * gain) as f32).collect(), cfg.sample_rate)?)
}

/// Writes every clip as `<out>/<class>/clip_<i>.wav` plus
/// `<out>/manifest.csv`, and returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::from("path,label,f0_hz\n");
    let jobs: Vec<(usize, usize)> = (0..cfg.n_classes).flat_map(|c| (0..cfg.clips_per_class).map(move |i| (c, i))).collect();
    for c in 0..cfg.n_classes {
        std::fs::create_dir_all(out_dir.join(cfg.class_name(c)))?;
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || -> Result<()> {
                    for &(c, i) in part {
                        let w = synth_clip(cfg, c, i)?;
                        write_wav(&out_dir.join(cfg.class_name(c)).join(format!("clip_{i:03}.wav")), &w)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("synth worker panicked"))
    })?;
    for &(c, i) in &jobs {
        let _ = writeln!(manifest, "{}/clip_{i:03}.wav,{},{:.1}", cfg.class_name(c), cfg.class_name(c), cfg.f0(c));
    }
    let path = out_dir.join("manifest.csv");
    std::fs::write(&path, manifest)?;
    Ok(path)
}
