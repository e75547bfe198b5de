//! Beam-search decoding, document-order context feedback and scoring.

pub mod metrics;


use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::FeatureMatrix;
use crate::error::{usage, Result};
use crate::model::{encoder_len, ContextInput, ContextMode, Model, MIN_FRAMES};
use crate::reseg::boundary_overlap;
use crate::tensor::Tensor;
use crate::text::{Tokenizer, BOS, EOS, PAD};

pub use metrics::{bleu, ter, BleuScore, TerScore};

/// Next-token log-probabilities given a prefix that starts with `BOS`.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// A model with its encoder (and context) states computed once.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub enc: Tensor,
    pub ctx: Option<Tensor>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, features: &FeatureMatrix, context: ContextInput) -> Result<Self> {
        Ok(ModelScorer {
            model,
            enc: model.encode(features)?,
            ctx: model.encode_context(context)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.enc, self.ctx.as_ref(), prefix)
    }
}

fn allowed(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Argmax decoding; ties go to the lowest id. Returns ids without framing.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 1 {
        return usage("max_len must be at least 1");
    }
    let mut seq = vec![BOS];
    for _ in 0..max_len {
        let lp = scorer.log_probs(&seq)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &p) in lp.iter().enumerate() {
            if allowed(tok) && best.is_none_or(|(_, b)| p > b) {
                best = Some((tok, p));
            }
        }
        let Some((tok, _)) = best else { break };
        if tok == EOS {
            break;
        }
        seq.push(tok);
    }
    Ok(seq[1..].to_vec())
}

/// Length-normalized beam search.
///
/// Each step keeps the `beam` best expansions by summed log-probability;
/// expansions ending in `EOS` leave the beam as finished hypotheses. Search
/// stops once `beam` hypotheses have finished, the beam is empty, or
/// `max_len` tokens were produced. The finished hypothesis with the highest
/// score per generated token (`EOS` included) wins.
pub fn beam_decode<S: StepScorer>(scorer: &mut S, beam: usize, max_len: usize) -> Result<Vec<usize>> {
    if beam < 1 {
        return usage("beam must be at least 1");
    }
    if max_len < 1 {
        return usage("max_len must be at least 1");
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, (seq, score)) in alive.iter().enumerate() {
            let lp = scorer.log_probs(seq)?;
            for (tok, &p) in lp.iter().enumerate() {
                if allowed(tok) && p > f64::NEG_INFINITY {
                    cands.push((score + p, h, tok));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::new();
        for &(score, h, tok) in cands.iter().take(beam) {
            let mut seq = alive[h].0.clone();
            seq.push(tok);
            if tok == EOS {
                let norm = score / (seq.len() - 1) as f64;
                finished.push((seq, norm));
            } else {
                next.push((seq, score));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam {
            break;
        }
    }
    if finished.len() < beam {
        for (seq, score) in alive {
            let norm = score / (seq.len() - 1) as f64;
            finished.push((seq, norm));
        }
    }
    let best = finished
        .iter()
        .reduce(|a, b| if b.1.total_cmp(&a.1) == Ordering::Greater { b } else { a });
    Ok(match best {
        Some((seq, _)) => seq[1..].iter().copied().filter(|&t| t != EOS).collect(),
        None => Vec::new(),
    })
}

/// Decoding length limit for a segment of `frames` feature frames.
pub fn max_decode_len(frames: usize) -> usize {
    encoder_len(frames) / 2 + 10
}

/// Where a segment's context comes from at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// The translation generated for the previous segment.
    Generated,
    /// The previous segment's reference (diagnostics only).
    Oracle,
}

#[derive(Debug, Clone)]
pub struct EvalSegment {
    pub idx: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub features: Arc<FeatureMatrix>,
    /// Segment-level reference words when known; used by oracle feedback.
    pub reference: Vec<String>,
}

/// A document's segments in order plus its full reference.
#[derive(Debug, Clone)]
pub struct EvalDocument {
    pub doc_id: String,
    pub segments: Vec<EvalSegment>,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub beam: usize,
    pub context: ContextMode,
    pub feedback: Feedback,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam: 4,
            context: ContextMode::None,
            feedback: Feedback::Generated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub doc_id: String,
    pub idx: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub hyp: String,
    /// Context words the segment was decoded with.
    pub ctx: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub ter: f64,
    pub segments: usize,
    pub documents: usize,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
}

/// Joins segment translations, dropping words that repeat the end of what
/// has been emitted so far.
pub fn join_segments(parts: &[Vec<String>]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in parts {
        let k = boundary_overlap(&out, p);
        out.extend_from_slice(&p[k..]);
    }
    out
}

/// Decodes a document's segments in order. Segments too short for the
/// encoder get an empty translation.
pub fn decode_document(
    model: &Model,
    tok: &Tokenizer,
    doc: &EvalDocument,
    opts: &EvalOptions,
) -> Result<Vec<Hypothesis>> {
    let mode = opts.context;
    if mode != ContextMode::None && mode != model.config.context_mode {
        return usage(format!(
            "model expects {:?} context, asked for {mode:?}",
            model.config.context_mode
        ));
    }
    let mut out = Vec::with_capacity(doc.segments.len());
    let mut prev_hyp: Vec<String> = Vec::new();
    for (k, seg) in doc.segments.iter().enumerate() {
        let prev = k.checked_sub(1).map(|p| &doc.segments[p]);
        let ctx_words: Vec<String> = match (mode, opts.feedback, prev) {
            (ContextMode::Text, Feedback::Generated, Some(_)) => prev_hyp.clone(),
            (ContextMode::Text, Feedback::Oracle, Some(p)) => p.reference.clone(),
            _ => Vec::new(),
        };
        let words = if seg.features.frames < MIN_FRAMES {
            Vec::new()
        } else {
            let ctx_ids = tok.encode(&ctx_words, false);
            let context = match (mode, prev) {
                (ContextMode::Text, _) => ContextInput::Text(&ctx_ids),
                (ContextMode::Audio, Some(p)) if p.features.frames >= MIN_FRAMES => {
                    ContextInput::Audio(&p.features)
                }
                _ => ContextInput::None,
            };
            let mut scorer = ModelScorer::new(model, &seg.features, context)?;
            let ids = beam_decode(&mut scorer, opts.beam, max_decode_len(seg.features.frames))?;
            tok.decode(&ids)?
        };
        out.push(Hypothesis {
            doc_id: doc.doc_id.clone(),
            idx: seg.idx,
            start_s: seg.start_s,
            end_s: seg.end_s,
            hyp: words.join(" "),
            ctx: ctx_words.join(" "),
        });
        prev_hyp = words;
    }
    Ok(out)
}

/// Scores assembled document translations against document references.
pub fn score_documents(hyps: &[Vec<String>], refs: &[Vec<String>], segments: usize) -> Result<EvalReport> {
    let b = bleu(hyps, refs)?;
    let t = ter(hyps, refs)?;
    Ok(EvalReport {
        bleu: b.bleu,
        precisions: b.precisions,
        brevity_penalty: b.brevity_penalty,
        ter: t.ter,
        segments,
        documents: hyps.len(),
        hyp_tokens: b.hyp_len,
        ref_tokens: b.ref_len,
    })
}

/// Decodes every document and scores at document level.
pub fn evaluate(
    model: &Model,
    tok: &Tokenizer,
    docs: &[EvalDocument],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Hypothesis>)> {
    let mut all = Vec::new();
    let mut doc_hyps = Vec::with_capacity(docs.len());
    for doc in docs {
        let hyps = decode_document(model, tok, doc, opts)?;
        let parts: Vec<Vec<String>> = hyps.iter().map(|h| crate::corpus::words(&h.hyp)).collect();
        doc_hyps.push(join_segments(&parts));
        all.extend(hyps);
    }
    let refs: Vec<Vec<String>> = docs.iter().map(|d| d.reference.clone()).collect();
    let report = score_documents(&doc_hyps, &refs, all.len())?;
    Ok((report, all))
}
