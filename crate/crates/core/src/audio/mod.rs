//! PCM clips, WAV I/O and log-Mel feature extraction.

mod augment;
mod cache;
mod mel;
mod norm;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use cache::{read_features, write_features, FEATURE_MAGIC};
pub use mel::{log_mel, mel_center_frequencies, num_frames, LOG_FLOOR, NUM_MEL};
pub use norm::{speaker_normalize, SpeakerStats, SpeakerStatsTable};

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const STRIDE_SAMPLES: usize = 160;

/// Mono PCM audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sub-clip between two times, clamped to the clip.
    pub fn slice_s(&self, start_s: f64, end_s: f64) -> AudioClip {
        let sr = self.sample_rate as f64;
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end_s * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        AudioClip::new(self.samples[a..b].to_vec(), self.sample_rate)
    }
}

/// Log-Mel features, `frames × NUM_MEL`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub data: Vec<f64>,
    pub speaker_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: usize, data: Vec<f64>, speaker_id: impl Into<String>) -> Self {
        debug_assert_eq!(data.len(), frames * NUM_MEL);
        FeatureMatrix {
            frames,
            data,
            speaker_id: speaker_id.into(),
        }
    }

    pub fn empty() -> Self {
        FeatureMatrix::new(0, Vec::new(), "")
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * NUM_MEL..(t + 1) * NUM_MEL]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * NUM_MEL + k]
    }
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) {}-bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: expected {SAMPLE_RATE} Hz, got {}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
