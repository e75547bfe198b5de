//! Documents with word timings and alignments, and the JSONL sample manifest.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Aligned word ranges of one original sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub src: Range<usize>,
    pub tgt: Range<usize>,
}

/// A talk: timed source words, target words and a word alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub audio: String,
    pub speaker: String,
    pub duration_s: f64,
    pub src: Vec<TimedWord>,
    pub tgt: Vec<String>,
    /// `(src_index, tgt_index)` pairs.
    pub alignment: Vec<(usize, usize)>,
    pub sentences: Vec<SentenceSpan>,
}

impl Document {
    pub fn validate(&self) -> Result<()> {
        for w in self.src.windows(2) {
            if w[1].start_s < w[0].start_s || w[1].start_s < w[0].end_s {
                return Err(Error::Format(format!("{}: word times not monotone", self.id)));
            }
        }
        for &(s, t) in &self.alignment {
            if s >= self.src.len() || t >= self.tgt.len() {
                return Err(Error::Format(format!(
                    "{}: alignment ({s},{t}) out of range",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One manifest line. `src`, `tgt` and `ctx` are space-separated words.
///
/// `speaker`, `word_times` and `alignment` are optional extensions that carry
/// what re-segmentation needs; readers tolerate their absence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: String,
    pub start_s: f64,
    pub end_s: f64,
    pub src: String,
    pub tgt: String,
    pub ctx: String,
    pub doc_id: String,
    pub idx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    /// Absolute `(start, end)` of each source word.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_times: Option<Vec<(f64, f64)>>,
    /// Alignment local to this entry's `src`/`tgt` words.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<(usize, usize)>>,
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(w: &mut W, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Sentence-level manifest lines for a document (one per sentence).
pub fn sentence_entries(doc: &Document) -> Vec<ManifestEntry> {
    let cuts = crate::reseg::cut_points(doc);
    doc.sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let src: Vec<&str> = doc.src[s.src.clone()].iter().map(|w| w.text.as_str()).collect();
            let tgt = doc.tgt[s.tgt.clone()].join(" ");
            let ctx = if i == 0 {
                String::new()
            } else {
                let p = &doc.sentences[i - 1];
                doc.tgt[p.tgt.clone()].join(" ")
            };
            let alignment = doc
                .alignment
                .iter()
                .filter(|(a, _)| s.src.contains(a))
                .map(|&(a, b)| (a - s.src.start, b.wrapping_sub(s.tgt.start)))
                .filter(|&(_, b)| b < s.tgt.len())
                .collect();
            ManifestEntry {
                audio: doc.audio.clone(),
                start_s: cuts[s.src.start],
                end_s: cuts[s.src.end],
                src: src.join(" "),
                tgt,
                ctx,
                doc_id: doc.id.clone(),
                idx: i,
                speaker: Some(doc.speaker.clone()),
                word_times: Some(doc.src[s.src.clone()].iter().map(|w| (w.start_s, w.end_s)).collect()),
                alignment: Some(alignment),
            }
        })
        .collect()
}

/// Rebuilds documents from sentence-level lines that carry word times and alignments.
pub fn documents_from_manifest(entries: &[ManifestEntry]) -> Result<Vec<Document>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&ManifestEntry>> = Default::default();
    for e in entries {
        if !groups.contains_key(&e.doc_id) {
            order.push(e.doc_id.clone());
        }
        groups.entry(e.doc_id.clone()).or_default().push(e);
    }
    let mut docs = Vec::new();
    for id in order {
        let mut lines = groups.remove(&id).unwrap_or_default();
        lines.sort_by_key(|e| e.idx);
        let mut doc = Document {
            id: id.clone(),
            audio: lines[0].audio.clone(),
            speaker: lines[0].speaker.clone().unwrap_or_default(),
            duration_s: 0.0,
            src: Vec::new(),
            tgt: Vec::new(),
            alignment: Vec::new(),
            sentences: Vec::new(),
        };
        for e in lines {
            let (Some(times), Some(align)) = (&e.word_times, &e.alignment) else {
                return usage(format!("{id}: manifest lacks word_times/alignment"));
            };
            let src = words(&e.src);
            if times.len() != src.len() {
                return Err(Error::Format(format!("{id}: word_times length mismatch")));
            }
            let (s0, t0) = (doc.src.len(), doc.tgt.len());
            for (w, &(a, b)) in src.into_iter().zip(times) {
                doc.src.push(TimedWord {
                    text: w,
                    start_s: a,
                    end_s: b,
                });
            }
            doc.tgt.extend(words(&e.tgt));
            doc.alignment
                .extend(align.iter().map(|&(a, b)| (a + s0, b + t0)));
            doc.sentences.push(SentenceSpan {
                src: s0..doc.src.len(),
                tgt: t0..doc.tgt.len(),
            });
            doc.duration_s = doc.duration_s.max(e.end_s);
        }
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}
