//! Log-mel spectrogram feature extraction.
//!
//! Pipeline: reflect-padded framing, periodic Hann window, one-sided FFT,
//! power spectrum, triangular HTK mel filterbank, natural log with a fixed
//! offset.

mod cache;
mod resample;
mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub use cache::{read_feature_cache, write_feature_cache};
pub use resample::resample;
pub use wav::{ingest_wav, read_wav_raw, write_wav};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("frequency must be non-negative, got {0}")]
    NegativeFrequency(f64),
    #[error("sample rate {got} Hz does not match the configured {expected} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("invalid waveform: {0}")]
    Waveform(String),
    #[error("{path}: unsupported WAV encoding: {field} = {value}")]
    UnsupportedFormat {
        path: String,
        field: &'static str,
        value: String,
    },
    #[error("{path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {msg}")]
    Cache { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Mono audio clip with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Waveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(DspError::Waveform(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a waveform, clipping samples into `[-1, 1]`.
    pub fn clipped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        for s in &mut samples {
            if s.is_finite() {
                *s = s.clamp(-1.0, 1.0);
            }
        }
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_offset: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 512,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8_000.0,
            log_offset: 1e-6,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DspError::Config(m));
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return fail(format!("n_fft = {} is not a power of two", self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return fail(format!("hop = {} must be in 1..=n_fft", self.hop));
        }
        if self.n_mels < 2 {
            return fail(format!("n_mels = {} must be at least 2", self.n_mels));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min) {
            return fail(format!("need 0 <= f_min < f_max, got {}..{}", self.f_min, self.f_max));
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return fail(format!("f_max = {} exceeds Nyquist {}", self.f_max, self.sample_rate as f64 / 2.0));
        }
        if !(self.log_offset > 0.0) {
            return fail("log_offset must be positive".into());
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count under center padding: `1 + floor(n_samples / hop)`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }
}

/// HTK mel scale, `2595 · log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if f < 0.0 || f.is_nan() {
        return Err(DspError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> Result<f64> {
    if m < 0.0 || m.is_nan() {
        return Err(DspError::NegativeFrequency(m));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// One-sided short-time spectrum, stored frame-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn new(n_bins: usize, n_frames: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), n_bins * n_frames);
        Self { n_bins, n_frames, data }
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn frame_mut(&mut self, frame: usize) -> &mut [Complex64] {
        &mut self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn magnitude(&self, bin: usize, frame: usize) -> f64 {
        self.get(bin, frame).norm()
    }

    /// Index of the strongest bin in a frame.
    pub fn peak_bin(&self, frame: usize) -> usize {
        self.frame(frame)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Maps an out-of-range index into `0..n` by mirror reflection (edge sample
/// not repeated), reflecting repeatedly for pads longer than the signal.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Center-padded STFT of raw samples with an arbitrary hop.
pub(crate) fn stft_raw(samples: &[f64], n_fft: usize, hop: usize, fft: &Arc<dyn Fft<f64>>) -> Spectrogram {
    let window = hann(n_fft);
    let n = samples.len();
    let n_frames = 1 + n / hop;
    let n_bins = n_fft / 2 + 1;
    let pad = (n_fft / 2) as isize;
    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for f in 0..n_frames {
        let start = (f * hop) as isize - pad;
        for (j, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
            let idx = start + j as isize;
            let s = if (0..n as isize).contains(&idx) { samples[idx as usize] } else { samples[reflect_index(idx, n)] };
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..n_bins]);
    }
    Spectrogram::new(n_bins, n_frames, data)
}

pub fn stft(w: &Waveform, cfg: &FeatureConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(DspError::Waveform("empty waveform".into()));
    }
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let samples: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    Ok(stft_raw(&samples, cfg.n_fft, cfg.hop, &fft))
}

/// Triangular filters (peak 1) with centers uniform on the mel axis.
///
/// Returned row-major, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (lo, hi) = (hz_to_mel(cfg.f_min)?, hz_to_mel(cfg.f_max)?);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect::<Result<_>>()?;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Ok((0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            (0..cfg.n_bins())
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect())
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(cfg.f_min)?, hz_to_mel(cfg.f_max)?);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Log-mel image, `n_mels × n_frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
    pub config: FeatureConfig,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    /// Pads with the log floor or truncates to `frames` columns.
    pub fn fit_frames(&self, frames: usize) -> Self {
        let floor = self.config.log_offset.ln() as f32;
        let mut values = Vec::with_capacity(self.n_mels * frames);
        for m in 0..self.n_mels {
            let row = &self.values[m * self.n_frames..(m + 1) * self.n_frames];
            values.extend(row.iter().take(frames));
            values.extend(std::iter::repeat_n(floor, frames.saturating_sub(self.n_frames)));
        }
        Self { n_mels: self.n_mels, n_frames: frames, values, config: self.config }
    }
}

/// Reusable extractor holding the FFT plan and filterbank.
pub struct MelExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    /// Sparse rows: (first nonzero bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        let bank = mel_filterbank(&cfg)?;
        let filters = bank
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&v| v > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&v| v > 0.0).map_or(first, |i| i + 1);
                (first, row[first..last].to_vec())
            })
            .collect();
        Ok(Self { cfg, fft: FftPlanner::new().plan_fft_forward(cfg.n_fft), filters })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Mel power (before the log), `n_mels × n_frames`.
    pub fn mel_power(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(DspError::SampleRateMismatch { expected: self.cfg.sample_rate, got: w.sample_rate() });
        }
        if w.is_empty() {
            return Err(DspError::Waveform("empty waveform".into()));
        }
        let samples: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
        let spec = stft_raw(&samples, self.cfg.n_fft, self.cfg.hop, &self.fft);
        let mut out = vec![0.0; self.cfg.n_mels * spec.n_frames];
        for f in 0..spec.n_frames {
            let frame = spec.frame(f);
            for (m, (first, weights)) in self.filters.iter().enumerate() {
                out[m * spec.n_frames + f] =
                    weights.iter().zip(&frame[*first..]).map(|(w, c)| w * c.norm_sqr()).sum();
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let power = self.mel_power(w)?;
        let n_frames = self.cfg.n_frames(w.len());
        Ok(MelSpectrogram {
            n_mels: self.cfg.n_mels,
            n_frames,
            values: power.iter().map(|&p| (p + self.cfg.log_offset).ln() as f32).collect(),
            config: self.cfg,
        })
    }
}

/// `log(filterbank · |stft|² + log_offset)`.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(*cfg)?.log_mel(w)
}
