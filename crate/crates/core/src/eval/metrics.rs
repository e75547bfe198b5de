//! Corpus BLEU and TER over whitespace tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

pub const BLEU_EPSILON: f64 = 1e-16;
pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level 4-gram BLEU with clipped counts. A precision of exactly zero
/// is replaced by `BLEU_EPSILON`.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return usage(format!("{} hypotheses for {} references", hyps.len(), refs.len()));
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return usage("empty reference corpus");
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=MAX_NGRAM {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if matched[n] == 0 {
            BLEU_EPSILON
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
    let bleu = if hyps == refs {
        100.0
    } else {
        (100.0 * brevity_penalty * log_mean.exp()).clamp(0.0, 100.0)
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerScore {
    pub ter: f64,
    pub edits: usize,
    pub ref_len: usize,
}

/// Longest block and farthest move considered by the shift search.
pub const MAX_SHIFT_SIZE: usize = 10;
pub const MAX_SHIFT_DIST: usize = 50;

/// Corpus TER in percent: total edits over total reference words.
pub fn ter(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<TerScore> {
    if hyps.len() != refs.len() {
        return usage(format!("{} hypotheses for {} references", hyps.len(), refs.len()));
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return usage("empty reference");
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| ter_edits(h, r)).sum();
    Ok(TerScore {
        ter: 100.0 * edits as f64 / ref_len as f64,
        edits,
        ref_len,
    })
}

/// Shifts plus insertions, deletions and substitutions for one pair.
///
/// Shifts are applied greedily: each round takes the shift with the lowest
/// resulting edit distance, provided it saves more than the shift costs.
/// Ties go to the leftmost block start, then the longest block, then the
/// leftmost destination.
pub fn ter_edits(hyp: &[String], reference: &[String]) -> usize {
    let mut ids: HashMap<&str, u32> = HashMap::new();
    for w in reference.iter().chain(hyp) {
        let next = ids.len() as u32;
        ids.entry(w.as_str()).or_insert(next);
    }
    let r: Vec<u32> = reference.iter().map(|w| ids[w.as_str()]).collect();
    let mut cur: Vec<u32> = hyp.iter().map(|w| ids[w.as_str()]).collect();
    let lev = Levenshtein::new(&r);

    let n = cur.len();
    let mut dist = lev.distance(&cur);
    let mut shifts = 0;
    let mut scratch = Vec::with_capacity(n);
    loop {
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for i in 0..n {
            for l in (1..=MAX_SHIFT_SIZE.min(n - i)).rev() {
                for j in 0..=n - l {
                    if j == i || j.abs_diff(i) > MAX_SHIFT_DIST {
                        continue;
                    }
                    shift_into(&cur, i, l, j, &mut scratch);
                    let d = lev.distance(&scratch);
                    if d + 1 < dist && best.is_none_or(|b| d < b.0) {
                        best = Some((d, i, l, j));
                    }
                }
            }
        }
        let Some((d, i, l, j)) = best else { break };
        shift_into(&cur, i, l, j, &mut scratch);
        std::mem::swap(&mut cur, &mut scratch);
        dist = d;
        shifts += 1;
    }
    shifts + dist
}

/// Moves `seq[i..i + l]` so that it starts at index `j` of the result.
pub fn shift_into<T: Copy>(seq: &[T], i: usize, l: usize, j: usize, out: &mut Vec<T>) {
    out.clear();
    let block = &seq[i..i + l];
    let rest = seq[..i].iter().chain(&seq[i + l..]);
    let mut rest = rest.copied();
    out.extend(rest.by_ref().take(j));
    out.extend_from_slice(block);
    out.extend(rest);
}

/// Word-level Levenshtein distance to a fixed reference, bit-parallel when
/// the reference fits in a machine word.
pub struct Levenshtein {
    reference: Vec<u32>,
    peq: HashMap<u32, u64>,
}

impl Levenshtein {
    pub fn new(reference: &[u32]) -> Self {
        let mut peq: HashMap<u32, u64> = HashMap::new();
        if reference.len() <= 64 {
            for (k, &t) in reference.iter().enumerate() {
                *peq.entry(t).or_insert(0) |= 1 << k;
            }
        }
        Levenshtein {
            reference: reference.to_vec(),
            peq,
        }
    }

    pub fn distance(&self, text: &[u32]) -> usize {
        let m = self.reference.len();
        if m == 0 {
            return text.len();
        }
        if m > 64 {
            return levenshtein_dp(&self.reference, text);
        }
        let top = 1u64 << (m - 1);
        let mut pv = u64::MAX;
        let mut mv = 0u64;
        let mut score = m;
        for c in text {
            let eq = self.peq.get(c).copied().unwrap_or(0);
            let xv = eq | mv;
            let xh = ((eq & pv).wrapping_add(pv) ^ pv) | eq;
            let mut ph = mv | !(xh | pv);
            let mut mh = pv & xh;
            if ph & top != 0 {
                score += 1;
            } else if mh & top != 0 {
                score -= 1;
            }
            ph = (ph << 1) | 1;
            mh <<= 1;
            pv = mh | !(xv | ph);
            mv = ph & xv;
        }
        score
    }
}

pub fn levenshtein_dp<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut row = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            row[j + 1] = sub.min(prev[j + 1] + 1).min(row[j] + 1);
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}
