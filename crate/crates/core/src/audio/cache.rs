use std::io::{Read, Write};

use super::{FeatureMatrix, NUM_MEL};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"SRSTFEAT";

/// Writes `magic, u32 T, u32 d` then `T·d` little-endian `f32`, row-major.
pub fn write_features<W: Write>(w: &mut W, m: &FeatureMatrix) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(m.frames as u32).to_le_bytes())?;
    w.write_all(&(NUM_MEL as u32).to_le_bytes())?;
    for &v in &m.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R, speaker_id: &str) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("bad feature magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let frames = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let dim = u32::from_le_bytes(word) as usize;
    if dim != NUM_MEL {
        return Err(Error::Format(format!("feature dim {dim}, expected {NUM_MEL}")));
    }
    let mut raw = vec![0u8; frames * dim * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureMatrix::new(frames, data, speaker_id))
}
