//! Binary feature cache: `LFT1`, then `n_mels` and `n_frames` as u32 LE,
//! then `n_mels · n_frames` row-major f32 LE values.

use std::path::Path;

use super::{DspError, Result};

const MAGIC: &[u8; 4] = b"LFT1";

pub fn write_feature_cache(path: &Path, n_mels: usize, n_frames: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), n_mels * n_frames);
    let mut buf = Vec::with_capacity(12 + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(n_mels as u32).to_le_bytes());
    buf.extend_from_slice(&(n_frames as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Returns `(n_mels, n_frames, values)`.
pub fn read_feature_cache(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| DspError::Cache { path: path.display().to_string(), msg: msg.into() };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing LFT1 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n_mels, n_frames) = (u32_at(4), u32_at(8));
    if bytes.len() != 12 + 4 * n_mels * n_frames {
        return Err(bad("payload length does not match header"));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((n_mels, n_frames, values))
}
