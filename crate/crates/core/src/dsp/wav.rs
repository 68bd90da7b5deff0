use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, DspError, Result, Waveform};

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> DspError + '_ {
    move |source| DspError::Wav { path: path.display().to_string(), source }
}

/// Reads a 16-bit PCM WAV file as mono samples at its native rate.
///
/// Stereo is averaged; integers are scaled by 1/32768.
pub fn read_wav_raw(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let unsupported = |field, value: String| DspError::UnsupportedFormat { path: path.display().to_string(), field, value };
    if spec.sample_format != SampleFormat::Int {
        return Err(unsupported("sample_format", "float".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(unsupported("bits_per_sample", spec.bits_per_sample.to_string()));
    }
    if !(1..=2).contains(&spec.channels) {
        return Err(unsupported("channels", spec.channels.to_string()));
    }
    let raw: Vec<i16> = reader.into_samples::<i16>().collect::<Result<_, _>>().map_err(wav_err(path))?;
    let scale = 1.0 / 32768.0;
    let samples: Vec<f32> = if spec.channels == 2 {
        raw.chunks_exact(2).map(|c| ((c[0] as f32 + c[1] as f32) * 0.5) * scale).collect()
    } else {
        raw.iter().map(|&v| v as f32 * scale).collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Reads a WAV file and resamples it to `target_rate`.
pub fn ingest_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let w = read_wav_raw(path)?;
    if w.sample_rate() == target_rate {
        return Ok(w);
    }
    Waveform::clipped(resample(w.samples(), w.sample_rate(), target_rate), target_rate)
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in w.samples() {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}
