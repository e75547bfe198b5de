//! Artificial random re-segmentation of sentence-aligned documents.
//!
//! One split word is drawn uniformly inside every original sentence. Each
//! fragment runs from a split word to the word before the next one and becomes
//! a training segment; the fragment before it supplies its context. Target
//! words are recovered through the word alignment, and fragments without any
//! aligned word are discarded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, ManifestEntry};
use crate::error::{usage, Result};

/// Audio cut times: `cuts[i]` is the boundary before source word `i`; the
/// first is 0 and the last is the document duration. Interior cuts sit at the
/// midpoint of the gap between adjacent words.
pub fn cut_points(doc: &Document) -> Vec<f64> {
    let n = doc.src.len();
    let mut cuts = Vec::with_capacity(n + 1);
    cuts.push(0.0);
    for i in 1..n {
        cuts.push(0.5 * (doc.src[i - 1].end_s + doc.src[i].start_s));
    }
    cuts.push(doc.duration_s.max(doc.src.last().map_or(0.0, |w| w.end_s)));
    cuts
}

/// One uniformly drawn split index per original sentence, ascending.
pub fn pick_splits<R: Rng>(doc: &Document, rng: &mut R) -> Result<Vec<usize>> {
    if doc.src.is_empty() {
        return usage(format!("{}: document has no source words", doc.id));
    }
    let mut splits = Vec::with_capacity(doc.sentences.len());
    for s in &doc.sentences {
        if s.src.is_empty() {
            continue;
        }
        splits.push(rng.gen_range(s.src.clone()));
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResegmentedSample {
    pub doc_id: String,
    pub idx: usize,
    /// Source word index range within the document.
    pub src_range: std::ops::Range<usize>,
    pub src: Vec<String>,
    pub start_s: f64,
    pub end_s: f64,
    pub tgt: Vec<String>,
    /// Preceding fragment's target, after overlap stripping.
    pub ctx: Vec<String>,
    /// Preceding fragment's target before stripping.
    pub raw_ctx: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ResegOutput {
    pub samples: Vec<ResegmentedSample>,
    pub fragments: usize,
    pub discarded: usize,
}

/// Target span `[min, max]` of target indices aligned to the fragment, or
/// `None` when no fragment word is aligned.
pub fn project_target(
    fragment: std::ops::Range<usize>,
    alignment: &[(usize, usize)],
) -> Option<std::ops::RangeInclusive<usize>> {
    let mut span: Option<(usize, usize)> = None;
    for &(s, t) in alignment {
        if fragment.contains(&s) {
            span = Some(match span {
                None => (t, t),
                Some((a, b)) => (a.min(t), b.max(t)),
            });
        }
    }
    span.map(|(a, b)| a..=b)
}

/// Length of the longest suffix of `ctx` equal to a prefix of `tgt`.
pub fn boundary_overlap(ctx: &[String], tgt: &[String]) -> usize {
    (1..=ctx.len().min(tgt.len()))
        .rev()
        .find(|&k| ctx[ctx.len() - k..] == tgt[..k])
        .unwrap_or(0)
}

/// Removes the longest context suffix that repeats the start of the target,
/// repeatedly, until no such overlap is left.
pub fn strip_overlap(ctx: &[String], tgt: &[String]) -> Vec<String> {
    let mut out = ctx.to_vec();
    loop {
        let k = boundary_overlap(&out, tgt);
        if k == 0 {
            return out;
        }
        out.truncate(out.len() - k);
    }
}

/// Builds samples from split indices. Fragment starts are `0` plus every split.
pub fn build_samples(doc: &Document, splits: &[usize]) -> ResegOutput {
    let n = doc.src.len();
    let mut starts: Vec<usize> = std::iter::once(0)
        .chain(splits.iter().copied().filter(|&s| s < n))
        .collect();
    starts.sort_unstable();
    starts.dedup();
    let cuts = cut_points(doc);

    let mut out = ResegOutput::default();
    let mut prev_tgt: Vec<String> = Vec::new();
    for (k, &a) in starts.iter().enumerate() {
        let b = starts.get(k + 1).copied().unwrap_or(n);
        out.fragments += 1;
        let Some(span) = project_target(a..b, &doc.alignment) else {
            out.discarded += 1;
            prev_tgt.clear();
            continue;
        };
        let tgt = doc.tgt[span].to_vec();
        let ctx = strip_overlap(&prev_tgt, &tgt);
        out.samples.push(ResegmentedSample {
            doc_id: doc.id.clone(),
            idx: out.samples.len(),
            src_range: a..b,
            src: doc.src[a..b].iter().map(|w| w.text.clone()).collect(),
            start_s: cuts[a],
            end_s: cuts[b],
            tgt: tgt.clone(),
            ctx,
            raw_ctx: std::mem::replace(&mut prev_tgt, tgt),
        });
    }
    out
}

/// Clean segmentation: one sample per original sentence.
pub fn sentence_samples(doc: &Document) -> ResegOutput {
    let starts: Vec<usize> = doc.sentences.iter().map(|s| s.src.start).collect();
    build_samples(doc, &starts)
}

/// The document's split stream. Keyed apart from the corpus generator, which
/// uses the bare document id, so equal seeds do not replay its draws.
pub fn split_stream(seed: u64, doc_id: &str) -> crate::rng::Rng {
    crate::rng::stream(seed, &format!("reseg/{doc_id}"))
}

/// Re-segments a document with its own RNG stream.
pub fn resegment(doc: &Document, seed: u64) -> Result<ResegOutput> {
    let mut rng = split_stream(seed, &doc.id);
    let splits = pick_splits(doc, &mut rng)?;
    Ok(build_samples(doc, &splits))
}

impl ResegmentedSample {
    pub fn to_entry(&self, doc: &Document) -> ManifestEntry {
        ManifestEntry {
            audio: doc.audio.clone(),
            start_s: self.start_s,
            end_s: self.end_s,
            src: self.src.join(" "),
            tgt: self.tgt.join(" "),
            ctx: self.ctx.join(" "),
            doc_id: self.doc_id.clone(),
            idx: self.idx,
            speaker: Some(doc.speaker.clone()),
            word_times: None,
            alignment: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SentenceSpan, TimedWord};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Monotone 1:1 document with the given sentence lengths.
    fn doc(lens: &[usize]) -> Document {
        let n: usize = lens.iter().sum();
        let src = (0..n)
            .map(|i| TimedWord {
                text: format!("w{i}"),
                start_s: i as f64 * 0.3,
                end_s: i as f64 * 0.3 + 0.2,
            })
            .collect();
        let mut sentences = Vec::new();
        let mut at = 0;
        for &l in lens {
            sentences.push(SentenceSpan {
                src: at..at + l,
                tgt: at..at + l,
            });
            at += l;
        }
        Document {
            id: "d".into(),
            audio: "d.wav".into(),
            speaker: "s".into(),
            duration_s: n as f64 * 0.3,
            src,
            tgt: (0..n).map(|i| format!("t{i}")).collect(),
            alignment: (0..n).map(|i| (i, i)).collect(),
            sentences,
        }
    }

    #[test]
    fn one_word_sentence_forces_zero() {
        let d = doc(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(pick_splits(&d, &mut rng).unwrap(), vec![0]);
    }

    #[test]
    fn empty_document_is_usage_error() {
        let d = doc(&[]);
        assert!(pick_splits(&d, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn seeded_splits_are_frozen() {
        let d = doc(&[5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let splits = pick_splits(&d, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trace = (rng.gen_range(0..5usize), rng.gen_range(5..10usize));
        assert_eq!(splits, vec![trace.0, trace.1]);
        assert_eq!(splits, GOLDEN_SPLITS);
    }

    const GOLDEN_SPLITS: &[usize] = &[3, 9];

    #[test]
    fn split_uniformity_on_five_words() {
        let d = doc(&[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[pick_splits(&d, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((1800..=2200).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn single_split_covers_document() {
        let d = doc(&[4, 3]);
        let out = build_samples(&d, &[0]);
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].src.len(), 7);
        assert!(out.samples[0].ctx.is_empty());
        assert_eq!(out.samples[0].start_s, 0.0);
        assert_eq!(out.samples[0].end_s, d.duration_s);
    }

    #[test]
    fn two_halves_partition() {
        let d = doc(&[3, 3]);
        let out = build_samples(&d, &[0, 3]);
        assert_eq!(out.samples.len(), 2);
        let cat: Vec<String> = out.samples.iter().flat_map(|s| s.src.clone()).collect();
        let orig: Vec<String> = d.src.iter().map(|w| w.text.clone()).collect();
        assert_eq!(cat, orig);
        assert_eq!(out.samples[1].ctx, s(&["t0", "t1", "t2"]));
    }

    #[test]
    fn projection_cases() {
        let mono: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        assert_eq!(project_target(2..5, &mono), Some(2..=4));
        assert_eq!(project_target(2..5, &[(0, 0), (6, 1)]), None);
        assert_eq!(project_target(0..2, &[(0, 1), (1, 0)]), Some(0..=1));
        assert_eq!(project_target(0..1, &[(0, 1), (1, 0)]), Some(1..=1));
    }

    #[test]
    fn unaligned_fragment_is_discarded() {
        let mut d = doc(&[3, 3]);
        d.alignment.retain(|&(s, _)| s < 3);
        let out = build_samples(&d, &[0, 3]);
        assert_eq!(out.fragments, 2);
        assert_eq!(out.discarded, 1);
        assert_eq!(out.samples.len() + out.discarded, out.fragments);
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_overlap(&s(&["a", "b", "c"]), &s(&["c", "d"])), s(&["a", "b"]));
        assert_eq!(strip_overlap(&s(&["a", "b"]), &s(&["c", "d"])), s(&["a", "b"]));
        assert!(strip_overlap(&s(&["a", "b"]), &s(&["a", "b"])).is_empty());
        let st = strip_overlap(&s(&["a", "a"]), &s(&["a", "b"]));
        assert_eq!(boundary_overlap(&st, &s(&["a", "b"])), 0);
    }

    proptest! {
        #[test]
        fn partition_and_cut_points(
            lens in prop::collection::vec(1usize..8, 1..5),
            seed in any::<u64>(),
        ) {
            let d = doc(&lens);
            let out = resegment(&d, seed).unwrap();
            let cat: Vec<String> = out.samples.iter().flat_map(|s| s.src.clone()).collect();
            let orig: Vec<String> = d.src.iter().map(|w| w.text.clone()).collect();
            prop_assert_eq!(cat, orig);
            for smp in &out.samples {
                let a = smp.src_range.start;
                let b = smp.src_range.end;
                prop_assert!(smp.start_s <= d.src[a].start_s);
                prop_assert!(smp.end_s >= d.src[b - 1].end_s);
                if a > 0 {
                    prop_assert!(smp.start_s >= d.src[a - 1].end_s);
                }
                if b < d.src.len() {
                    prop_assert!(smp.end_s <= d.src[b].start_s);
                }
            }
            for w in out.samples.windows(2) {
                prop_assert_eq!(&w[1].raw_ctx, &w[0].tgt);
                prop_assert_eq!(boundary_overlap(&w[1].ctx, &w[1].tgt), 0);
            }
        }

        #[test]
        fn strip_leaves_no_overlap(
            ctx in prop::collection::vec("[ab]", 0..6),
            tgt in prop::collection::vec("[ab]", 0..6),
        ) {
            let st = strip_overlap(&ctx, &tgt);
            prop_assert_eq!(boundary_overlap(&st, &tgt), 0);
            prop_assert!(ctx.starts_with(&st));
        }
    }
}
