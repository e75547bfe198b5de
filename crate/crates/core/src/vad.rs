//! Energy-threshold voice activity detection.
//!
//! A frame is speech when its RMS level, in dBFS relative to a full-scale
//! sine, exceeds the threshold of the configured aggressiveness. Speech runs
//! separated by at most `hangover_frames` non-speech frames are merged into one
//! segment.

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{usage, Error, Result};

pub const FRAME_SIZES_MS: [u32; 3] = [10, 20, 30];
pub const AGGRESSIVENESS_LEVELS: [u8; 4] = [0, 1, 2, 3];
/// Longest segment a retained configuration may produce.
pub const MAX_SEGMENT_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VadConfig {
    pub frame_ms: u32,
    pub aggressiveness: u8,
    pub hangover_frames: usize,
}

impl VadConfig {
    pub fn new(frame_ms: u32, aggressiveness: u8, hangover_ms: u32) -> Result<Self> {
        if !FRAME_SIZES_MS.contains(&frame_ms) {
            return usage(format!("frame size must be 10, 20 or 30 ms, got {frame_ms}"));
        }
        if aggressiveness > 3 {
            return usage(format!("aggressiveness must be 0..=3, got {aggressiveness}"));
        }
        Ok(VadConfig {
            frame_ms,
            aggressiveness,
            hangover_frames: (hangover_ms / frame_ms) as usize,
        })
    }

    pub fn frame_samples(&self) -> usize {
        (SAMPLE_RATE / 1000 * self.frame_ms) as usize
    }

    /// Decision threshold in dBFS.
    pub fn threshold_dbfs(&self) -> f64 {
        threshold_dbfs(self.aggressiveness)
    }

    /// All 12 frame-size × aggressiveness combinations with a shared hangover.
    pub fn grid(hangover_ms: u32) -> Vec<VadConfig> {
        let mut out = Vec::new();
        for f in FRAME_SIZES_MS {
            for a in AGGRESSIVENESS_LEVELS {
                out.push(VadConfig::new(f, a, hangover_ms).expect("grid values are valid"));
            }
        }
        out
    }
}

pub fn threshold_dbfs(aggressiveness: u8) -> f64 {
    -50.0 + 5.0 * aggressiveness.min(3) as f64
}

/// RMS level in dBFS, where a full-scale sine reads 0 dBFS.
pub fn frame_level_dbfs(frame: &[f32]) -> f64 {
    if frame.is_empty() {
        return f64::NEG_INFINITY;
    }
    let ms = frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / frame.len() as f64;
    20.0 * (ms.sqrt() * std::f64::consts::SQRT_2).log10()
}

pub fn frame_decision(frame: &[f32], config: &VadConfig) -> Result<bool> {
    if frame.len() != config.frame_samples() {
        return usage(format!(
            "frame has {} samples, config expects {}",
            frame.len(),
            config.frame_samples()
        ));
    }
    Ok(frame_level_dbfs(frame) > config.threshold_dbfs())
}

/// Speech span within a clip, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Per-frame decisions over whole frames; a trailing partial frame is ignored.
pub fn frame_decisions(clip: &AudioClip, config: &VadConfig) -> Result<Vec<bool>> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "VAD expects {SAMPLE_RATE} Hz audio, got {}",
            clip.sample_rate
        )));
    }
    clip.samples
        .chunks_exact(config.frame_samples())
        .map(|f| frame_decision(f, config))
        .collect()
}

/// Merged speech runs as `[first, last]` frame indices.
pub fn speech_runs(decisions: &[bool], hangover_frames: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, _) in decisions.iter().enumerate().filter(|(_, &s)| s) {
        match runs.last_mut() {
            Some((_, last)) if i - *last - 1 <= hangover_frames => *last = i,
            _ => runs.push((i, i)),
        }
    }
    runs
}

pub fn segment_stream(clip: &AudioClip, config: &VadConfig) -> Result<Vec<Segment>> {
    let decisions = frame_decisions(clip, config)?;
    let frame_s = config.frame_ms as f64 / 1000.0;
    Ok(speech_runs(&decisions, config.hangover_frames)
        .into_iter()
        .map(|(a, b)| Segment {
            start_s: a as f64 * frame_s,
            end_s: (b + 1) as f64 * frame_s,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub pct_filtered_audio: f64,
    pub num_segments: usize,
    pub max_len_s: Option<f64>,
    pub min_len_s: Option<f64>,
}

pub fn report(segments: &[Segment], total_duration_s: f64) -> Result<SegmentationReport> {
    if total_duration_s <= 0.0 {
        return usage("total duration must be positive");
    }
    let covered: f64 = segments.iter().map(Segment::len_s).sum();
    let lens = segments.iter().map(Segment::len_s);
    Ok(SegmentationReport {
        pct_filtered_audio: 100.0 * (1.0 - covered / total_duration_s),
        num_segments: segments.len(),
        max_len_s: lens.clone().reduce(f64::max),
        min_len_s: lens.reduce(f64::min),
    })
}

/// Keep-or-discard rule: no segment longer than 60 s and at most twice the
/// reference segment count.
pub fn retained(report: &SegmentationReport, ref_segment_count: usize) -> bool {
    report.max_len_s.is_none_or(|m| m <= MAX_SEGMENT_S)
        && report.num_segments <= 2 * ref_segment_count
}

/// Runs every configuration over the clip set and keeps those passing [`retained`].
pub fn sweep_and_filter(
    clips: &[AudioClip],
    configs: &[VadConfig],
    ref_segment_count: usize,
) -> Result<Vec<(VadConfig, SegmentationReport)>> {
    if clips.is_empty() {
        return usage("sweep needs at least one clip");
    }
    let total: f64 = clips.iter().map(AudioClip::duration_s).sum();
    let mut kept = Vec::new();
    for cfg in configs {
        let mut all = Vec::new();
        for c in clips {
            all.extend(segment_stream(c, cfg)?);
        }
        let rep = report(&all, total)?;
        if retained(&rep, ref_segment_count) {
            kept.push((*cfg, rep));
        }
    }
    Ok(kept)
}
