//! Turns documents and segment lists into model-ready samples.
//!
//! Features are computed once per document, normalized per speaker, and
//! segments take the frames whose analysis windows fall inside their span.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use crate::audio::{AudioClip, FeatureMatrix, SpeakerStatsTable, SAMPLE_RATE, STRIDE_SAMPLES, WINDOW_SAMPLES};
use crate::corpus::{words, Document, ManifestEntry};
use crate::error::{Error, Result};
use crate::eval::{EvalDocument, EvalSegment};
use crate::reseg::project_target;
use crate::text::Tokenizer;
use crate::train::TrainSample;
use crate::vad::{segment_stream, Segment, VadConfig};

/// Frames `[t0, t1)` whose 25 ms windows start at or after `start_s` and end
/// by `end_s`, clamped to `total`.
pub fn frame_range(total: usize, start_s: f64, end_s: f64) -> Range<usize> {
    let hop = STRIDE_SAMPLES as f64;
    let t0 = ((start_s * SAMPLE_RATE as f64 / hop) - 1e-9).ceil().max(0.0) as usize;
    let last = end_s * SAMPLE_RATE as f64 - WINDOW_SAMPLES as f64;
    let t1 = if last < 0.0 {
        0
    } else {
        ((last + 1e-9) / hop).floor() as usize + 1
    };
    let t1 = t1.min(total);
    t0.min(t1)..t1
}

pub fn slice_frames(m: &FeatureMatrix, r: Range<usize>) -> FeatureMatrix {
    let d = m.data.len() / m.frames.max(1);
    FeatureMatrix::new(r.len(), m.data[r.start * d..r.end * d].to_vec(), m.speaker_id.clone())
}

/// Speaker-normalized document features keyed by audio name.
#[derive(Debug, Clone, Default)]
pub struct FeatureBank {
    pub docs: BTreeMap<String, Arc<FeatureMatrix>>,
}

impl FeatureBank {
    /// Normalizes raw features with statistics from `stats`.
    pub fn from_raw(raw: BTreeMap<String, FeatureMatrix>, stats: &SpeakerStatsTable) -> Self {
        FeatureBank {
            docs: raw.into_iter().map(|(k, m)| (k, Arc::new(stats.normalize(&m)))).collect(),
        }
    }

    pub fn get(&self, audio: &str) -> Result<&Arc<FeatureMatrix>> {
        self.docs
            .get(audio)
            .ok_or_else(|| Error::Lookup(format!("no features for {audio:?}")))
    }

    pub fn segment(&self, audio: &str, start_s: f64, end_s: f64) -> Result<FeatureMatrix> {
        let m = self.get(audio)?;
        Ok(slice_frames(m, frame_range(m.frames, start_s, end_s)))
    }
}

/// One training sample per manifest line. The audio context of a line is the
/// previous line of the same document when their indices are consecutive.
pub fn train_samples(entries: &[ManifestEntry], bank: &FeatureBank, tok: &Tokenizer) -> Result<Vec<TrainSample>> {
    let mut out: Vec<TrainSample> = Vec::with_capacity(entries.len());
    let mut prev: Option<(&ManifestEntry, Arc<FeatureMatrix>)> = None;
    for e in entries {
        let features = Arc::new(bank.segment(&e.audio, e.start_s, e.end_s)?);
        let ctx_audio = match &prev {
            Some((p, f)) if p.doc_id == e.doc_id && p.idx + 1 == e.idx => Some(f.clone()),
            _ => None,
        };
        out.push(TrainSample {
            key: format!("{}#{}", e.doc_id, e.idx),
            features: features.clone(),
            target: tok.encode(&words(&e.tgt), false),
            ctx_text: tok.encode(&words(&e.ctx), false),
            ctx_audio,
            duration_s: e.end_s - e.start_s,
        });
        prev = Some((e, features));
    }
    Ok(out)
}

/// Target words of the source words whose midpoints fall inside the span.
pub fn span_reference(doc: &Document, start_s: f64, end_s: f64) -> Vec<String> {
    let inside: Vec<usize> = doc
        .src
        .iter()
        .enumerate()
        .filter(|(_, w)| {
            let mid = 0.5 * (w.start_s + w.end_s);
            mid >= start_s && mid < end_s
        })
        .map(|(i, _)| i)
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => project_target(a..b + 1, &doc.alignment)
            .map(|r| doc.tgt[r].to_vec())
            .unwrap_or_default(),
        _ => Vec::new(),
    }
}

/// Builds an evaluation document from `(start_s, end_s)` segments.
pub fn eval_document(doc: &Document, spans: &[(f64, f64)], bank: &FeatureBank) -> Result<EvalDocument> {
    let segments = spans
        .iter()
        .enumerate()
        .map(|(idx, &(a, b))| {
            Ok(EvalSegment {
                idx,
                start_s: a,
                end_s: b,
                features: Arc::new(bank.segment(&doc.audio, a, b)?),
                reference: span_reference(doc, a, b),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalDocument {
        doc_id: doc.id.clone(),
        segments,
        reference: doc.tgt.clone(),
    })
}

/// Sentence spans of a document, cut at inter-word midpoints.
pub fn sentence_spans(doc: &Document) -> Vec<(f64, f64)> {
    let cuts = crate::reseg::cut_points(doc);
    doc.sentences.iter().map(|s| (cuts[s.src.start], cuts[s.src.end])).collect()
}

pub fn vad_spans(clip: &AudioClip, cfg: &VadConfig) -> Result<Vec<(f64, f64)>> {
    Ok(segment_stream(clip, cfg)?
        .iter()
        .map(|s: &Segment| (s.start_s, s.end_s))
        .collect())
}
