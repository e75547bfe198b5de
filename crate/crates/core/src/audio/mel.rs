use std::sync::{Arc, OnceLock};

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{AudioClip, FeatureMatrix, SAMPLE_RATE, STRIDE_SAMPLES, WINDOW_SAMPLES};
use crate::error::{Error, Result};

pub const NUM_MEL: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;
const FFT_SIZE: usize = 512;
const PRE_EMPHASIS: f64 = 0.97;
const MAX_HZ: f64 = 8000.0;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Frame count for a clip of `num_samples` samples.
pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        (num_samples - WINDOW_SAMPLES) / STRIDE_SAMPLES + 1
    }
}

/// Edge frequencies of the filterbank: `NUM_MEL + 2` points evenly spaced on the Mel scale.
fn mel_edges() -> Vec<f64> {
    let top = hz_to_mel(MAX_HZ);
    (0..NUM_MEL + 2)
        .map(|i| mel_to_hz(top * i as f64 / (NUM_MEL + 1) as f64))
        .collect()
}

/// Peak frequency of each triangular filter, in Hz.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_edges()[1..=NUM_MEL].to_vec()
}

struct Frontend {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `NUM_MEL × (FFT_SIZE/2 + 1)` filter weights.
    filters: Vec<Vec<f64>>,
}

fn frontend() -> &'static Frontend {
    static FRONTEND: OnceLock<Frontend> = OnceLock::new();
    FRONTEND.get_or_init(|| {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        // periodic Hann
        let window = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
            })
            .collect();
        let edges = mel_edges();
        let bins = FFT_SIZE / 2 + 1;
        let filters = (0..NUM_MEL)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|b| {
                        let f = b as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                        let up = (f - lo) / (c - lo);
                        let down = (hi - f) / (hi - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Frontend {
            fft,
            window,
            filters,
        }
    })
}

/// 40-band log-Mel features with a 25 ms window and 10 ms stride.
///
/// Each frame is pre-emphasised on its own, so features depend only on the
/// samples inside the window.
pub fn log_mel(clip: &AudioClip, speaker_id: &str) -> Result<FeatureMatrix> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "log_mel expects {SAMPLE_RATE} Hz audio, got {}",
            clip.sample_rate
        )));
    }
    let fe = frontend();
    let frames = num_frames(clip.samples.len());
    let mut data = Vec::with_capacity(frames * NUM_MEL);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    for t in 0..frames {
        let frame = &clip.samples[t * STRIDE_SAMPLES..t * STRIDE_SAMPLES + WINDOW_SAMPLES];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..WINDOW_SAMPLES {
            let prev = if n == 0 { frame[0] } else { frame[n - 1] } as f64;
            let v = frame[n] as f64 - PRE_EMPHASIS * prev;
            buf[n] = Complex::new(v * fe.window[n], 0.0);
        }
        fe.fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &fe.filters {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(FeatureMatrix::new(frames, data, speaker_id))
}
