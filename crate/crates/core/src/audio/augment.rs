use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, NUM_MEL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    /// Maximum frequency-mask width.
    pub freq_width: usize,
    pub freq_masks: usize,
    /// Maximum time-mask width in frames.
    pub time_width: usize,
    pub time_masks: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            freq_width: 4,
            freq_masks: 1,
            time_width: 10,
            time_masks: 1,
        }
    }
}

/// Zeroes random frequency bands and time spans. Training only.
pub fn spec_augment<R: Rng>(
    features: &FeatureMatrix,
    rng: &mut R,
    cfg: &SpecAugmentConfig,
) -> FeatureMatrix {
    let mut out = features.clone();
    let frames = features.frames;
    for _ in 0..cfg.freq_masks {
        let w = rng.gen_range(0..=cfg.freq_width).min(NUM_MEL);
        let f0 = rng.gen_range(0..=NUM_MEL - w);
        for t in 0..frames {
            out.data[t * NUM_MEL + f0..t * NUM_MEL + f0 + w].fill(0.0);
        }
    }
    if frames > 0 {
        for _ in 0..cfg.time_masks {
            let w = rng.gen_range(0..=cfg.time_width).min(frames);
            let t0 = rng.gen_range(0..=frames - w);
            out.data[t0 * NUM_MEL..(t0 + w) * NUM_MEL].fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(frames: usize) -> FeatureMatrix {
        FeatureMatrix::new(frames, vec![1.0; frames * NUM_MEL], "s")
    }

    #[test]
    fn zero_widths_are_noop() {
        let m = ones(30);
        let cfg = SpecAugmentConfig {
            freq_width: 0,
            time_width: 0,
            ..Default::default()
        };
        let out = spec_augment(&m, &mut ChaCha8Rng::seed_from_u64(0), &cfg);
        assert_eq!(out, m);
    }

    #[test]
    fn shape_preserved_on_empty_and_short() {
        for frames in [0, 1, 3, 50] {
            let m = ones(frames);
            let out = spec_augment(&m, &mut ChaCha8Rng::seed_from_u64(1), &Default::default());
            assert_eq!(out.frames, frames);
            assert_eq!(out.data.len(), m.data.len());
        }
    }

    /// Fully zeroed columns and rows.
    fn bands(m: &FeatureMatrix) -> (Vec<usize>, Vec<usize>) {
        let cols = (0..NUM_MEL)
            .filter(|&k| (0..m.frames).all(|t| m.get(t, k) == 0.0))
            .collect();
        let rows = (0..m.frames)
            .filter(|&t| m.row(t).iter().all(|&v| v == 0.0))
            .collect();
        (cols, rows)
    }

    #[test]
    fn fixed_seed_golden_masks() {
        let m = ones(60);
        let cfg = SpecAugmentConfig::default();
        let a = spec_augment(&m, &mut ChaCha8Rng::seed_from_u64(42), &cfg);
        let b = spec_augment(&m, &mut ChaCha8Rng::seed_from_u64(42), &cfg);
        assert_eq!(a, b);
        let (cols, rows) = bands(&a);
        assert_eq!(cols, GOLDEN_COLS);
        assert_eq!(rows, GOLDEN_ROWS);
        let zeros = a.data.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, cols.len() * 60 + rows.len() * NUM_MEL - cols.len() * rows.len());
    }

    const GOLDEN_COLS: &[usize] = &[36, 37, 38];
    const GOLDEN_ROWS: &[usize] = &[8, 9, 10];
}
