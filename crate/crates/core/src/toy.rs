//! Synthetic audio-translation corpus with exact word timings and alignments.
//!
//! Every source word has a fixed acoustic signature (a three-tone chord with
//! its own duration, loudness and onset ramp). Targets are a word-for-word
//! dictionary mapping with each adjacent word pair swapped, so the alignment
//! is total and reorders within pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::corpus::{Document, SentenceSpan, TimedWord};
use crate::error::{usage, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub speakers: usize,
    pub documents: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            vocab_size: 30,
            min_words: 3,
            max_words: 12,
            min_sentences: 2,
            max_sentences: 5,
            speakers: 8,
            documents: 100,
            seed: 1,
        }
    }
}

pub const WORD_GAP_S: f64 = 0.050;
pub const SENTENCE_GAP_S: f64 = 0.300;
const TONE_SLOTS: usize = 24;
const BASE_TONE_HZ: f64 = 250.0;
const SLOT_RATIO: f64 = 1.14;
const TONE_AMPLITUDE: f64 = 0.12;
/// Fixed seed for word acoustics, independent of the corpus seed.
const ACOUSTIC_SEED: u64 = 0x70_79_5e_ed;

/// Acoustic signature of one vocabulary word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSound {
    pub tones_hz: [f64; 3],
    pub duration_s: f64,
    pub gain_db: f64,
    pub ramp_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub gain_db: f64,
    pub pitch: f64,
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const TGT_CONSONANTS: &[char] = &['z', 'v', 'h', 'w', 'x', 'j', 'c', 'q'];

fn syllable(i: usize) -> String {
    format!("{}{}", CONSONANTS[i % CONSONANTS.len()], VOWELS[(i / CONSONANTS.len()) % VOWELS.len()])
}

/// Source spelling of word `i`.
pub fn source_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    format!("{}{}", syllable(i % n), syllable((i / n + 7 * i) % n))
}

/// Target spelling of word `i`.
pub fn target_word(i: usize) -> String {
    let n = TGT_CONSONANTS.len();
    format!(
        "{}{}{}{}",
        TGT_CONSONANTS[i % n],
        VOWELS[(i / n) % VOWELS.len()],
        TGT_CONSONANTS[(i * 3 + 1) % n],
        if i / (n * VOWELS.len()) > 0 { format!("{}", i / (n * VOWELS.len())) } else { String::new() }
    )
}

/// Pair swap: `[a, b, c, d, e] -> [b, a, d, c, e]` as source-index order.
pub fn swap_order(n: usize) -> Vec<usize> {
    (0..n)
        .map(|j| if j % 2 == 0 { if j + 1 < n { j + 1 } else { j } } else { j - 1 })
        .collect()
}

/// Translation of a sentence of word ids and its alignment.
pub fn transform(ids: &[usize]) -> (Vec<String>, Vec<(usize, usize)>) {
    let order = swap_order(ids.len());
    let tgt = order.iter().map(|&s| target_word(ids[s])).collect();
    let align = order.iter().enumerate().map(|(t, &s)| (s, t)).collect();
    (tgt, align)
}

/// Acoustic tables for the whole vocabulary.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub sounds: Vec<WordSound>,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl Lexicon {
    pub fn new(vocab_size: usize) -> Self {
        let mut r = rng::seeded(ACOUSTIC_SEED);
        let mut used = std::collections::HashSet::new();
        let mut sounds = Vec::with_capacity(vocab_size);
        while sounds.len() < vocab_size {
            let mut slots: Vec<usize> = (0..TONE_SLOTS).collect();
            slots.shuffle(&mut r);
            let mut chord = [slots[0], slots[1], slots[2]];
            chord.sort_unstable();
            // neighbouring slots blur under pitch offsets
            if chord[1] - chord[0] < 2 || chord[2] - chord[1] < 2 || !used.insert(chord) {
                continue;
            }
            sounds.push(WordSound {
                tones_hz: chord.map(|k| BASE_TONE_HZ * SLOT_RATIO.powi(k as i32)),
                duration_s: 0.150 + 0.010 * r.gen_range(0..=10) as f64,
                gain_db: r.gen_range(-6.0..=0.0),
                ramp_s: r.gen_range(0.010..=0.040),
            });
        }
        Lexicon {
            sounds,
            src: (0..vocab_size).map(source_word).collect(),
            tgt: (0..vocab_size).map(target_word).collect(),
        }
    }

    pub fn id_of(&self, src_word: &str) -> Option<usize> {
        self.src.iter().position(|w| w == src_word)
    }
}

pub fn speakers(count: usize, seed: u64) -> Vec<Speaker> {
    let mut r = rng::stream(seed, "speakers");
    (0..count)
        .map(|i| Speaker {
            id: format!("spk{i}"),
            gain_db: r.gen_range(-10.0..=0.0),
            pitch: r.gen_range(0.97..=1.03),
        })
        .collect()
}

fn render_word(out: &mut Vec<f32>, sound: &WordSound, speaker: &Speaker) {
    let n = (sound.duration_s * SAMPLE_RATE as f64).round() as usize;
    let ramp = (sound.ramp_s * SAMPLE_RATE as f64).round() as usize;
    let amp = TONE_AMPLITUDE * 10f64.powf((sound.gain_db + speaker.gain_db) / 20.0);
    for i in 0..n {
        let t = i as f64 / SAMPLE_RATE as f64;
        let edge = i.min(n - 1 - i);
        let env = if edge < ramp {
            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        let s: f64 = sound
            .tones_hz
            .iter()
            .map(|f| (2.0 * std::f64::consts::PI * f * speaker.pitch * t).sin())
            .sum();
        out.push((amp * env * s) as f32);
    }
}

fn silence(out: &mut Vec<f32>, seconds: f64) {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    out.extend(std::iter::repeat(0.0).take(n));
}

/// Renders sentences (word ids) back to back. Returns the clip and each
/// word's `(start, end)` in seconds; times are sample-exact.
pub fn render_sentences(
    lex: &Lexicon,
    sentences: &[Vec<usize>],
    speaker: &Speaker,
) -> (AudioClip, Vec<(f64, f64)>) {
    let mut out = Vec::new();
    let mut times = Vec::new();
    let sr = SAMPLE_RATE as f64;
    for (si, sent) in sentences.iter().enumerate() {
        if si > 0 && !sentences[..si].iter().all(Vec::is_empty) {
            silence(&mut out, SENTENCE_GAP_S);
        }
        for (wi, &w) in sent.iter().enumerate() {
            if wi > 0 {
                silence(&mut out, WORD_GAP_S);
            }
            let start = out.len() as f64 / sr;
            render_word(&mut out, &lex.sounds[w], speaker);
            times.push((start, out.len() as f64 / sr));
        }
    }
    (AudioClip::new(out, SAMPLE_RATE), times)
}

/// One sentence.
pub fn render_audio(lex: &Lexicon, words: &[usize], speaker: &Speaker) -> (AudioClip, Vec<(f64, f64)>) {
    render_sentences(lex, &[words.to_vec()], speaker)
}

/// Generated corpus: documents carry text, times and alignments; audio is
/// re-rendered on demand from `word_ids`.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub spec: ToySpec,
    pub lexicon: Lexicon,
    pub speakers: Vec<Speaker>,
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
}

impl ToyCorpus {
    pub fn generate(spec: &ToySpec) -> Result<Self> {
        if spec.vocab_size < 2 {
            return usage(format!("vocab size must be >= 2, got {}", spec.vocab_size));
        }
        if spec.min_words == 0 || spec.min_words > spec.max_words {
            return usage("invalid sentence length range");
        }
        if spec.min_sentences == 0 || spec.min_sentences > spec.max_sentences {
            return usage("invalid sentences-per-document range");
        }
        if spec.speakers == 0 {
            return usage("need at least one speaker");
        }
        let lexicon = Lexicon::new(spec.vocab_size);
        let speakers = speakers(spec.speakers, spec.seed);
        let mut docs = Vec::with_capacity(spec.documents);
        for d in 0..spec.documents {
            let id = format!("doc{d:05}");
            let mut r = rng::stream(spec.seed, &id);
            let speaker = &speakers[r.gen_range(0..speakers.len())];
            let n_sent = r.gen_range(spec.min_sentences..=spec.max_sentences);
            let sentences: Vec<Vec<usize>> = (0..n_sent)
                .map(|_| {
                    let len = r.gen_range(spec.min_words..=spec.max_words);
                    (0..len).map(|_| r.gen_range(0..spec.vocab_size)).collect()
                })
                .collect();
            docs.push(build_document(&lexicon, &id, speaker, &sentences));
        }
        let n_train = spec.documents * 90 / 100;
        let n_valid = spec.documents * 5 / 100;
        let test = docs.split_off(n_train + n_valid);
        let valid = docs.split_off(n_train);
        Ok(ToyCorpus {
            spec: spec.clone(),
            lexicon,
            speakers,
            train: docs,
            valid,
            test,
        })
    }

    pub fn all_documents(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn speaker(&self, id: &str) -> Option<&Speaker> {
        self.speakers.iter().find(|s| s.id == id)
    }

    /// Renders a document's audio.
    pub fn render(&self, doc: &Document) -> Result<AudioClip> {
        render_document(&self.lexicon, &self.speakers, doc)
    }
}

pub fn render_document(lex: &Lexicon, speakers: &[Speaker], doc: &Document) -> Result<AudioClip> {
    let speaker = speakers
        .iter()
        .find(|s| s.id == doc.speaker)
        .ok_or_else(|| crate::Error::Lookup(format!("speaker {}", doc.speaker)))?;
    let mut sentences = Vec::new();
    for s in &doc.sentences {
        let ids = doc.src[s.src.clone()]
            .iter()
            .map(|w| {
                lex.id_of(&w.text)
                    .ok_or_else(|| crate::Error::Lookup(format!("word {}", w.text)))
            })
            .collect::<Result<Vec<_>>>()?;
        sentences.push(ids);
    }
    Ok(render_sentences(lex, &sentences, speaker).0)
}

pub fn build_document(lex: &Lexicon, id: &str, speaker: &Speaker, sentences: &[Vec<usize>]) -> Document {
    let (clip, times) = render_sentences_timing(lex, sentences);
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut alignment = Vec::new();
    let mut spans = Vec::new();
    for sent in sentences {
        let (s0, t0) = (src.len(), tgt.len());
        for &w in sent {
            let (a, b) = times[src.len()];
            src.push(TimedWord {
                text: lex.src[w].clone(),
                start_s: a,
                end_s: b,
            });
        }
        let (t, al) = transform(sent);
        tgt.extend(t);
        alignment.extend(al.into_iter().map(|(a, b)| (a + s0, b + t0)));
        spans.push(SentenceSpan {
            src: s0..src.len(),
            tgt: t0..tgt.len(),
        });
    }
    Document {
        id: id.to_string(),
        audio: format!("{id}.wav"),
        speaker: speaker.id.clone(),
        duration_s: clip,
        src,
        tgt,
        alignment,
        sentences: spans,
    }
}

/// Word times and total duration without synthesising samples.
fn render_sentences_timing(lex: &Lexicon, sentences: &[Vec<usize>]) -> (f64, Vec<(f64, f64)>) {
    let sr = SAMPLE_RATE as f64;
    let mut at = 0usize;
    let mut times = Vec::new();
    for (si, sent) in sentences.iter().enumerate() {
        if si > 0 && !sentences[..si].iter().all(Vec::is_empty) {
            at += (SENTENCE_GAP_S * sr).round() as usize;
        }
        for (wi, &w) in sent.iter().enumerate() {
            if wi > 0 {
                at += (WORD_GAP_S * sr).round() as usize;
            }
            let n = (lex.sounds[w].duration_s * sr).round() as usize;
            times.push((at as f64 / sr, (at + n) as f64 / sr));
            at += n;
        }
    }
    (at as f64 / sr, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{log_mel, NUM_MEL};
    use crate::vad::{segment_stream, VadConfig};

    #[test]
    fn transform_swaps_pairs() {
        let (t, a) = transform(&[4, 7, 9]);
        assert_eq!(t, vec![target_word(7), target_word(4), target_word(9)]);
        assert_eq!(a, vec![(1, 0), (0, 1), (2, 2)]);
    }

    #[test]
    fn spellings_are_unique() {
        let lex = Lexicon::new(200);
        let s: std::collections::HashSet<_> = lex.src.iter().collect();
        let t: std::collections::HashSet<_> = lex.tgt.iter().collect();
        assert_eq!(s.len(), 200);
        assert_eq!(t.len(), 200);
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = ToySpec { documents: 20, ..Default::default() };
        let a = ToyCorpus::generate(&spec).unwrap();
        let b = ToyCorpus::generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = ToyCorpus::generate(&ToySpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn tiny_vocab_rejected() {
        let spec = ToySpec { vocab_size: 1, ..Default::default() };
        assert!(ToyCorpus::generate(&spec).is_err());
    }

    #[test]
    fn split_is_90_5_5() {
        let spec = ToySpec { documents: 100, ..Default::default() };
        let c = ToyCorpus::generate(&spec).unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (90, 5, 5));
    }

    #[test]
    fn alignment_total_and_pairwise_on_1000_docs() {
        let spec = ToySpec { documents: 1000, ..Default::default() };
        let c = ToyCorpus::generate(&spec).unwrap();
        for d in c.all_documents() {
            d.validate().unwrap();
            assert_eq!(d.src.len(), d.tgt.len());
            let mut seen_src = vec![0; d.src.len()];
            for &(s, t) in &d.alignment {
                seen_src[s] += 1;
                let sent = d.sentences.iter().find(|sp| sp.src.contains(&s)).unwrap();
                let (ls, lt) = (s - sent.src.start, t - sent.tgt.start);
                let n = sent.src.len();
                let want = if ls % 2 == 1 { ls - 1 } else if ls + 1 < n { ls + 1 } else { ls };
                assert_eq!(lt, want);
            }
            assert!(seen_src.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn empty_sentence_renders_nothing() {
        let lex = Lexicon::new(30);
        let spk = &speakers(1, 0)[0];
        let (clip, times) = render_audio(&lex, &[], spk);
        assert!(clip.samples.is_empty());
        assert!(times.is_empty());
    }

    #[test]
    fn three_200ms_words_last_700ms() {
        let lex = Lexicon::new(30);
        let ids: Vec<usize> = (0..30)
            .filter(|&i| (lex.sounds[i].duration_s - 0.2).abs() < 1e-9)
            .take(3)
            .collect();
        assert_eq!(ids.len(), 3, "lexicon has three 200 ms words");
        let spk = &speakers(1, 0)[0];
        let (clip, times) = render_audio(&lex, &ids, spk);
        assert!((clip.duration_s() - 0.70).abs() < 1e-12);
        let want = [(0.0, 0.2), (0.25, 0.45), (0.5, 0.7)];
        for (g, w) in times.iter().zip(want) {
            assert!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12);
        }
    }

    #[test]
    fn word_times_tile_the_clip() {
        let spec = ToySpec { documents: 30, ..Default::default() };
        let c = ToyCorpus::generate(&spec).unwrap();
        for d in c.all_documents() {
            let clip = c.render(d).unwrap();
            assert!((clip.duration_s() - d.duration_s).abs() < 1e-12);
            let mut covered = d.src.iter().map(|w| w.end_s - w.start_s).sum::<f64>();
            for s in &d.sentences {
                covered += (s.src.len() - 1) as f64 * WORD_GAP_S;
            }
            covered += (d.sentences.len() - 1) as f64 * SENTENCE_GAP_S;
            assert!((covered - d.duration_s).abs() < 1e-9);
        }
    }

    #[test]
    fn vad_splits_at_sentence_gaps_only() {
        let spec = ToySpec { documents: 20, ..Default::default() };
        let c = ToyCorpus::generate(&spec).unwrap();
        let cfg = VadConfig::new(20, 3, 100).unwrap();
        for d in c.train.iter().take(10) {
            let clip = c.render(d).unwrap();
            let segs = segment_stream(&clip, &cfg).unwrap();
            assert_eq!(segs.len(), d.sentences.len(), "{}", d.id);
            for (sg, sp) in segs.iter().zip(&d.sentences) {
                let first = &d.src[sp.src.start];
                let last = &d.src[sp.src.end - 1];
                assert!((sg.start_s - first.start_s).abs() <= 0.06);
                assert!((sg.end_s - last.end_s).abs() <= 0.06);
            }
        }
    }

    #[test]
    fn signatures_are_separable() {
        let lex = Lexicon::new(30);
        let neutral = Speaker { id: "n".into(), gain_db: 0.0, pitch: 1.0 };
        let centered = |clip: &AudioClip| -> Vec<f64> {
            let f = log_mel(clip, "s").unwrap();
            let mut m: Vec<f64> = (0..NUM_MEL)
                .map(|k| (0..f.frames).map(|t| f.get(t, k)).sum::<f64>() / f.frames as f64)
                .collect();
            let mu = m.iter().sum::<f64>() / NUM_MEL as f64;
            m.iter_mut().for_each(|v| *v -= mu);
            m
        };
        let templates: Vec<Vec<f64>> = (0..30)
            .map(|w| centered(&render_audio(&lex, &[w], &neutral).0))
            .collect();
        let spec = ToySpec { documents: 40, ..Default::default() };
        let c = ToyCorpus::generate(&spec).unwrap();
        let (mut hit, mut total) = (0, 0);
        for d in c.all_documents() {
            let clip = c.render(d).unwrap();
            for w in &d.src {
                let feats = centered(&clip.slice_s(w.start_s, w.end_s));
                let best = (0..30)
                    .min_by(|&a, &b| {
                        let da: f64 = templates[a].iter().zip(&feats).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = templates[b].iter().zip(&feats).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                hit += (lex.src[best] == w.text) as usize;
                total += 1;
            }
        }
        assert!(hit as f64 / total as f64 >= 0.99, "{hit}/{total}");
    }
}
