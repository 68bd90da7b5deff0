//! Waveform augmentation: phase-vocoder time stretch followed by a sine
//! waveshaper. Augmented clips are additions to the training data; the
//! originals are always kept.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::dsp::{hann, stft_raw, DspError, Spectrogram, Waveform};
use crate::seed;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("time-stretch rate {0} outside [0.25, 4]")]
    Rate(f64),
    #[error("distortion lambda {0} outside (0, 1]")]
    Lambda(f64),
    #[error("invalid augmentation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

/// Phase-vocoder frame size; the analysis hop is a quarter of it.
pub const VOCODER_FFT: usize = 1024;

/// Parameter ranges for the augmentation chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub stretch_rate_range: (f64, f64),
    pub distortion_lambda_range: (f64, f64),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { stretch_rate_range: (0.8, 1.25), distortion_lambda_range: (0.3, 0.9) }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.stretch_rate_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 < 4.0) {
            return Err(AugmentError::Spec(format!("stretch range [{r0}, {r1}] must lie in (0, 4)")));
        }
        let (l0, l1) = self.distortion_lambda_range;
        if !(l0 > 0.0 && l0 <= l1 && l1 <= 1.0) {
            return Err(AugmentError::Spec(format!("lambda range [{l0}, {l1}] must lie in (0, 1]")));
        }
        Ok(())
    }
}

/// How many augmented copies each training clip gets, and the seed all
/// draws derive from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentationPlan {
    pub k: usize,
    pub global_seed: u64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self { k: 3, global_seed: 0 }
    }
}

/// Parameters of one augmented copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rate: f64,
    pub lambda: f64,
}

/// Draws the parameters for copy `aug_index` of clip `clip_id`.
///
/// The stretch rate is log-uniform so that slowing down and speeding up are
/// equally likely; lambda is uniform.
pub fn draw_params(plan: &AugmentationPlan, spec: &AugmentationSpec, clip_id: u64, aug_index: u64) -> AugmentParams {
    let mut rng = seed::stream(plan.global_seed, &[0xA11, clip_id, aug_index]);
    let (r0, r1) = spec.stretch_rate_range;
    let (l0, l1) = spec.distortion_lambda_range;
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    AugmentParams { rate: (r0.ln() + u * (r1.ln() - r0.ln())).exp(), lambda: l0 + v * (l1 - l0) }
}

fn inverse_stft(spec: &Spectrogram, n_fft: usize, hop: usize, length: usize) -> Vec<f64> {
    let window = hann(n_fft);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let total = n_fft + hop * spec.n_frames.saturating_sub(1);
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for f in 0..spec.n_frames {
        let frame = spec.frame(f);
        for k in 0..n_fft {
            buf[k] = if k <= n_fft / 2 { frame[k] } else { frame[n_fft - k].conj() };
        }
        // DC and Nyquist bins of a real signal are real
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        ifft.process(&mut buf);
        let off = f * hop;
        for j in 0..n_fft {
            out[off + j] += buf[j].re / n_fft as f64 * window[j];
            norm[off + j] += window[j] * window[j];
        }
    }
    let pad = n_fft / 2;
    (0..length)
        .map(|i| {
            let j = i + pad;
            if j < total && norm[j] > 1e-10 {
                out[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

fn wrap_phase(x: f64) -> f64 {
    x - 2.0 * PI * (x / (2.0 * PI)).round()
}

/// Phase-vocoder time stretch by `rate` (> 1 speeds up), then zero-pad or
/// truncate back to the input length. Samples are clipped to `[-1, 1]`.
pub fn time_stretch(w: &Waveform, rate: f64) -> Result<Waveform> {
    if !(0.25..=4.0).contains(&rate) {
        return Err(AugmentError::Rate(rate));
    }
    if w.is_empty() {
        return Ok(w.clone());
    }
    let n_fft = VOCODER_FFT;
    let hop = n_fft / 4;
    let samples: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let spec = stft_raw(&samples, n_fft, hop, &fft);
    let n_bins = spec.n_bins;

    let steps: Vec<f64> = (0..).map(|i| i as f64 * rate).take_while(|&t| t < spec.n_frames as f64).collect();
    let advance: Vec<f64> = (0..n_bins).map(|k| 2.0 * PI * hop as f64 * k as f64 / n_fft as f64).collect();
    // polar form per frame, with one trailing silent frame
    let mut mags = vec![0.0; (spec.n_frames + 1) * n_bins];
    let mut args = vec![0.0; (spec.n_frames + 1) * n_bins];
    for t in 0..spec.n_frames {
        for k in 0..n_bins {
            let c = spec.get(k, t);
            mags[t * n_bins + k] = c.norm();
            args[t * n_bins + k] = c.arg();
        }
    }
    let polar = |t: usize, k: usize| {
        let i = t.min(spec.n_frames) * n_bins + k;
        (mags[i], args[i])
    };

    let mut phase: Vec<f64> = args[..n_bins].to_vec();
    let mut out = Vec::with_capacity(steps.len() * n_bins);
    for &step in &steps {
        let t = step.floor() as usize;
        let alpha = step - t as f64;
        for k in 0..n_bins {
            let ((m0, a0), (m1, a1)) = (polar(t, k), polar(t + 1, k));
            let mag = (1.0 - alpha) * m0 + alpha * m1;
            out.push(Complex64::from_polar(mag, phase[k]));
            let dphi = wrap_phase(a1 - a0 - advance[k]);
            phase[k] += advance[k] + dphi;
        }
    }
    let stretched = Spectrogram::new(n_bins, steps.len(), out);
    let target = (samples.len() as f64 / rate).round() as usize;
    let mut y = inverse_stft(&stretched, n_fft, hop, target);
    y.resize(samples.len(), 0.0);
    Ok(Waveform::clipped(y.into_iter().map(|v| v as f32).collect(), w.sample_rate())?)
}

/// Endpoint-normalized sine waveshaper `sin(π·λ·x/2) / sin(π·λ/2)`.
pub fn sin_distortion(w: &Waveform, lambda: f64) -> Result<Waveform> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(AugmentError::Lambda(lambda));
    }
    let a = PI * lambda / 2.0;
    let norm = a.sin();
    let y = w.samples().iter().map(|&x| ((a * x as f64).sin() / norm) as f32).collect();
    Ok(Waveform::clipped(y, w.sample_rate())?)
}

/// Stretch, then distort.
pub fn augment_one(w: &Waveform, p: AugmentParams) -> Result<Waveform> {
    sin_distortion(&time_stretch(w, p.rate)?, p.lambda)
}

/// Produces the `plan.k` augmented copies of one clip.
pub fn apply_plan(
    w: &Waveform,
    clip_id: u64,
    plan: &AugmentationPlan,
    spec: &AugmentationSpec,
) -> Result<Vec<Waveform>> {
    spec.validate()?;
    (0..plan.k as u64)
        .map(|i| augment_one(w, draw_params(plan, spec, clip_id, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, FeatureConfig};

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let sr = 16_000;
        let n = (secs * sr as f64) as usize;
        Waveform::new(
            (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32).collect(),
            sr,
        )
        .unwrap()
    }

    fn magnitudes(w: &Waveform) -> Vec<f64> {
        let s = stft(w, &FeatureConfig::default()).unwrap();
        (0..s.n_frames).flat_map(|f| s.frame(f).iter().map(|c| c.norm()).collect::<Vec<_>>()).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn unit_rate_reproduces_input() {
        let mut s: Vec<f32> = tone(300.0, 1.0, 0.4).samples().to_vec();
        for (i, v) in s.iter_mut().enumerate() {
            *v += 0.2 * (2.0 * PI * 1870.0 * i as f64 / 16_000.0).sin() as f32;
        }
        let w = Waveform::new(s, 16_000).unwrap();
        let y = time_stretch(&w, 1.0).unwrap();
        assert_eq!(y.len(), w.len());
        assert!(cosine(&magnitudes(&w), &magnitudes(&y)) > 0.99);
        let max_err = w.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max_err < 1e-3, "{max_err}");
    }

    #[test]
    fn length_is_preserved() {
        let w = tone(440.0, 0.7, 0.5);
        for rate in [0.25, 0.8, 1.0, 1.25, 4.0] {
            assert_eq!(time_stretch(&w, rate).unwrap().len(), w.len());
        }
        assert!(time_stretch(&w, 0.2).is_err());
        assert!(time_stretch(&w, 4.5).is_err());
    }

    #[test]
    fn stretch_preserves_pitch() {
        let w = tone(440.0, 2.0, 0.5);
        let y = time_stretch(&w, 1.25).unwrap();
        let s = stft(&y, &FeatureConfig::default()).unwrap();
        let expected = 440.0 / (16_000.0 / 1024.0);
        // frames inside the stretched (shortened) region
        let active = (w.len() as f64 / 1.25 / 512.0) as usize;
        for f in 2..active - 2 {
            assert!((s.peak_bin(f) as f64 - expected).abs() <= 1.0, "frame {f}: {}", s.peak_bin(f));
        }
    }

    #[test]
    fn sin_distortion_values() {
        let w = Waveform::new(vec![0.0, 1.0, 0.5, -1.0, -0.5], 16_000).unwrap();
        let y = sin_distortion(&w, 1.0).unwrap();
        assert_eq!(y.samples()[0], 0.0);
        assert!((y.samples()[1] - 1.0).abs() < 1e-7);
        assert!((y.samples()[2] - 0.70710677).abs() < 1e-6);
        assert!((y.samples()[3] + 1.0).abs() < 1e-7);
        let y3 = sin_distortion(&w, 0.3).unwrap();
        assert_eq!(y3.samples()[0], 0.0);
        assert!(sin_distortion(&w, 0.0).is_err());
        assert!(sin_distortion(&w, 1.1).is_err());
    }

    #[test]
    fn sin_distortion_monotone_and_bounded() {
        let xs: Vec<f32> = (0..=200).map(|i| i as f32 / 100.0 - 1.0).collect();
        let w = Waveform::new(xs, 16_000).unwrap();
        for lambda in [0.05, 0.3, 0.6, 0.9, 1.0] {
            let y = sin_distortion(&w, lambda).unwrap();
            assert!(y.samples().windows(2).all(|p| p[0] <= p[1]));
            assert!(y.samples().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn plan_determinism_and_count() {
        let w = tone(200.0, 0.5, 0.8);
        let spec = AugmentationSpec::default();
        let plan = AugmentationPlan { k: 3, global_seed: 9 };
        let a = apply_plan(&w, 17, &plan, &spec).unwrap();
        let b = apply_plan(&w, 17, &plan, &spec).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        let c = apply_plan(&w, 18, &plan, &spec).unwrap();
        assert_ne!(a, c);
        assert!(apply_plan(&w, 1, &AugmentationPlan { k: 0, global_seed: 9 }, &spec).unwrap().is_empty());
        for y in &a {
            assert_eq!(y.len(), w.len());
            assert!(y.samples().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn drawn_params_stay_in_range() {
        let spec = AugmentationSpec::default();
        let plan = AugmentationPlan { k: 3, global_seed: 1 };
        for clip in 0..200 {
            let p = draw_params(&plan, &spec, clip, clip % 3);
            assert!((0.8..=1.25).contains(&p.rate));
            assert!((0.3..=0.9).contains(&p.lambda));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentationSpec::default().validate().is_ok());
        let bad = AugmentationSpec { stretch_rate_range: (0.0, 1.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentationSpec { distortion_lambda_range: (0.5, 1.5), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
