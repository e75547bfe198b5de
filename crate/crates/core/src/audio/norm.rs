use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, NUM_MEL};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-8;

/// Per-coefficient mean and variance over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub frames: usize,
}

impl SpeakerStats {
    pub fn identity() -> Self {
        SpeakerStats {
            mean: vec![0.0; NUM_MEL],
            variance: vec![1.0; NUM_MEL],
            frames: 0,
        }
    }

    pub fn from_features<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Self {
        let mut sum = vec![0.0; NUM_MEL];
        let mut sq = vec![0.0; NUM_MEL];
        let mut n = 0usize;
        for m in mats {
            for t in 0..m.frames {
                for (k, &v) in m.row(t).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            n += m.frames;
        }
        if n == 0 {
            return SpeakerStats::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let variance = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0))
            .collect();
        SpeakerStats {
            mean,
            variance,
            frames: n,
        }
    }
}

/// `(x - mean) / sqrt(var + 1e-8)` per coefficient.
pub fn speaker_normalize(features: &FeatureMatrix, stats: &SpeakerStats) -> FeatureMatrix {
    let inv: Vec<f64> = stats
        .variance
        .iter()
        .map(|v| 1.0 / (v + NORM_EPS).sqrt())
        .collect();
    let data = features
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let k = i % NUM_MEL;
            (x - stats.mean[k]) * inv[k]
        })
        .collect();
    FeatureMatrix::new(features.frames, data, features.speaker_id.clone())
}

/// Statistics per speaker, with corpus-wide statistics as a fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStatsTable {
    pub speakers: BTreeMap<String, SpeakerStats>,
    pub global: SpeakerStats,
}

impl SpeakerStatsTable {
    pub fn build<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix> + Clone) -> Self {
        let mut grouped: BTreeMap<String, Vec<&FeatureMatrix>> = BTreeMap::new();
        for m in mats.clone() {
            grouped.entry(m.speaker_id.clone()).or_default().push(m);
        }
        let speakers = grouped
            .into_iter()
            .map(|(k, v)| (k, SpeakerStats::from_features(v)))
            .collect();
        SpeakerStatsTable {
            speakers,
            global: SpeakerStats::from_features(mats),
        }
    }

    /// Strict lookup.
    pub fn get(&self, speaker: &str) -> Result<&SpeakerStats> {
        self.speakers
            .get(speaker)
            .ok_or_else(|| Error::Lookup(format!("no statistics for speaker {speaker:?}")))
    }

    /// Speaker statistics, or the global ones for unseen speakers.
    pub fn get_or_global(&self, speaker: &str) -> &SpeakerStats {
        self.speakers.get(speaker).unwrap_or(&self.global)
    }

    pub fn normalize(&self, features: &FeatureMatrix) -> FeatureMatrix {
        speaker_normalize(features, self.get_or_global(&features.speaker_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, frames: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * NUM_MEL).map(|_| rng.gen_range(-5.0..3.0)).collect();
        FeatureMatrix::new(frames, data, "spk")
    }

    #[test]
    fn self_stats_standardize_columns() {
        let m = random_matrix(1, 50);
        let out = speaker_normalize(&m, &SpeakerStats::from_features([&m]));
        for k in 0..NUM_MEL {
            let col: Vec<f64> = (0..50).map(|t| out.get(t, k)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_stats_are_near_noop() {
        let m = random_matrix(2, 10);
        let out = speaker_normalize(&m, &SpeakerStats::identity());
        for (a, b) in m.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_column_goes_to_zero() {
        let mut m = random_matrix(3, 20);
        for t in 0..20 {
            m.data[t * NUM_MEL + 7] = -4.2;
        }
        let out = speaker_normalize(&m, &SpeakerStats::from_features([&m]));
        for t in 0..20 {
            assert!(out.get(t, 7).abs() < 1e-6);
            assert!(out.get(t, 7).is_finite());
        }
    }

    #[test]
    fn missing_speaker_lookup_fails_and_falls_back() {
        let m = random_matrix(4, 5);
        let table = SpeakerStatsTable::build([&m]);
        assert!(matches!(table.get("other"), Err(Error::Lookup(_))));
        assert_eq!(table.get_or_global("other"), &table.global);
        assert!(table.get("spk").is_ok());
    }
}
