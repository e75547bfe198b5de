//! wasm-bindgen entry points for `www/index.html`. Every function returns a
//! JSON string so the page needs no generated type bindings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use segrobust::audio::{log_mel, NUM_MEL};
use segrobust::corpus::Document;
use segrobust::reseg::resegment;
use segrobust::toy::{ToyCorpus, ToySpec};
use segrobust::train::{lr_schedule, TrainConfig};
use segrobust::vad::{segment_stream, VadConfig};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn toy_document(seed: u64, sentences: usize) -> Result<(ToyCorpus, Document), JsError> {
    let spec = ToySpec {
        documents: 1,
        min_sentences: sentences,
        max_sentences: sentences,
        seed,
        ..ToySpec::default()
    };
    let corpus = ToyCorpus::generate(&spec).map_err(js_err)?;
    let doc = corpus.all_documents().next().cloned().ok_or_else(|| JsError::new("empty corpus"))?;
    Ok((corpus, doc))
}

#[derive(Serialize)]
struct Span {
    start_s: f64,
    end_s: f64,
    text: String,
}

#[derive(Serialize)]
struct ClipView {
    duration_s: f64,
    /// Peak absolute amplitude per 10 ms.
    envelope: Vec<f32>,
    n_mels: usize,
    frames: usize,
    /// Row-major `frames × n_mels` log-Mel energies.
    mel: Vec<f32>,
    words: Vec<Span>,
    sentences: Vec<Span>,
    segments: Vec<Span>,
}

/// Renders a toy document and runs the log-Mel front end and the VAD on it.
#[wasm_bindgen]
pub fn clip_view(seed: u64, frame_ms: u32, aggressiveness: u8, hangover_ms: u32) -> Result<String, JsError> {
    let (corpus, doc) = toy_document(seed, 3)?;
    let clip = corpus.render(&doc).map_err(js_err)?;
    let feats = log_mel(&clip, &doc.speaker).map_err(js_err)?;
    let cfg = VadConfig::new(frame_ms, aggressiveness, hangover_ms).map_err(js_err)?;
    let segments = segment_stream(&clip, &cfg).map_err(js_err)?;
    let view = ClipView {
        duration_s: clip.duration_s(),
        envelope: clip
            .samples
            .chunks(160)
            .map(|c| c.iter().fold(0f32, |m, s| m.max(s.abs())))
            .collect(),
        n_mels: NUM_MEL,
        frames: feats.frames,
        mel: feats.data.iter().map(|&v| v as f32).collect(),
        words: doc
            .src
            .iter()
            .map(|w| Span { start_s: w.start_s, end_s: w.end_s, text: w.text.clone() })
            .collect(),
        sentences: doc
            .sentences
            .iter()
            .map(|s| Span {
                start_s: doc.src[s.src.start].start_s,
                end_s: doc.src[s.src.end - 1].end_s,
                text: doc.tgt[s.tgt.clone()].join(" "),
            })
            .collect(),
        segments: segments
            .iter()
            .map(|s| Span { start_s: s.start_s, end_s: s.end_s, text: String::new() })
            .collect(),
    };
    serde_json::to_string(&view).map_err(js_err)
}

/// Learning rate at `points` evenly spaced steps in `[0, steps]`.
#[wasm_bindgen]
pub fn lr_curve(lr_start: f64, lr_peak: f64, warmup_steps: usize, steps: usize, points: usize) -> Result<String, JsError> {
    let cfg = TrainConfig { lr_start, lr_peak, warmup_steps, ..TrainConfig::default() };
    cfg.validate().map_err(js_err)?;
    let n = points.max(2);
    let curve: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            let s = i * steps / (n - 1);
            (s, lr_schedule(&cfg, s))
        })
        .collect();
    serde_json::to_string(&curve).map_err(js_err)
}

#[derive(Serialize)]
struct Fragment {
    src: String,
    tgt: String,
    ctx: String,
    raw_ctx: String,
    start_s: f64,
    end_s: f64,
}

#[derive(Serialize)]
struct ResegView {
    sentences: Vec<(String, String)>,
    fragments: Vec<Fragment>,
    discarded: usize,
}

/// A toy document's sentences next to one random re-segmentation of it.
#[wasm_bindgen]
pub fn reseg_view(doc_seed: u64, split_seed: u64) -> Result<String, JsError> {
    let (_, doc) = toy_document(doc_seed, 4)?;
    let out = resegment(&doc, split_seed).map_err(js_err)?;
    let view = ResegView {
        sentences: doc
            .sentences
            .iter()
            .map(|s| {
                let src: Vec<&str> = doc.src[s.src.clone()].iter().map(|w| w.text.as_str()).collect();
                (src.join(" "), doc.tgt[s.tgt.clone()].join(" "))
            })
            .collect(),
        fragments: out
            .samples
            .iter()
            .map(|s| Fragment {
                src: s.src.join(" "),
                tgt: s.tgt.join(" "),
                ctx: s.ctx.join(" "),
                raw_ctx: s.raw_ctx.join(" "),
                start_s: s.start_s,
                end_s: s.end_s,
            })
            .collect(),
        discarded: out.discarded,
    };
    serde_json::to_string(&view).map_err(js_err)
}
