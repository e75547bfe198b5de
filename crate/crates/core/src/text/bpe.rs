use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{usage, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// End-of-word marker carried by the last symbol of each word.
pub const EOW: char = '\u{2581}';

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{EOW}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_word(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

/// Ordered list of merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    alphabet: Vec<String>,
}

impl BpeModel {
    /// Greedy merge learning: the most frequent adjacent pair is merged first,
    /// ties go to the lexicographically smallest pair. Stops early once no pair
    /// occurs at least twice.
    pub fn learn(corpus: &[Vec<String>], n_merges: i64) -> Result<Self> {
        if n_merges < 0 {
            return usage(format!("n_merges must be >= 0, got {n_merges}"));
        }
        if corpus.iter().all(|l| l.is_empty()) {
            return usage("cannot learn BPE from an empty corpus");
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut words: Vec<(Vec<String>, usize)> = counts
            .iter()
            .map(|(w, &c)| (initial_symbols(w), c))
            .collect();
        let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.clone()).collect();

        let mut merges = Vec::new();
        while merges.len() < n_merges as usize {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((l, r), c)) = best else { break };
            if c < 2 {
                break;
            }
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                merge_word(syms, &l, &r);
            }
            merges.push((l, r));
        }
        Ok(Self::from_parts(merges, alphabet.into_iter().collect()))
    }

    fn from_parts(merges: Vec<(String, String)>, alphabet: Vec<String>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeModel {
            merges,
            ranks,
            alphabet,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Initial symbols seen while learning, sorted.
    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    /// Subword segmentation of one word.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_word(&mut syms, l, r);
        }
        syms
    }

    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.segment_word(t)).collect()
    }

    /// One merge per line, `left right`.
    pub fn to_merges_file(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_merges_file(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::Format(format!("merge line {}: {line:?}", n + 1))),
            }
        }
        Ok(Self::from_parts(merges, Vec::new()))
    }
}

/// Token/id table with reserved ids `pad=0, bos=1, eos=2, unk=3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens, then the alphabet, then merge results in creation order.
    pub fn from_model(model: &BpeModel) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for a in &model.alphabet {
            v.push(a.clone());
        }
        for (l, r) in &model.merges {
            v.push(format!("{l}{r}"));
        }
        v
    }

    fn push(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Usage(format!("id {id} outside vocabulary of {}", self.len())))
    }

    /// `token<TAB>id` lines.
    pub fn to_file(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_file(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {line:?}")))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("vocab id in {line:?}")))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Format("vocabulary ids are not contiguous".into()));
        }
        let tokens: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Format("vocabulary lacks reserved tokens".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}

/// BPE model plus the vocabulary built from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn learn(corpus: &[Vec<String>], n_merges: i64) -> Result<Self> {
        let bpe = BpeModel::learn(corpus, n_merges)?;
        let vocab = Vocabulary::from_model(&bpe);
        Ok(Tokenizer { bpe, vocab })
    }

    /// Subword ids; with `framing`, wrapped in `bos … eos`.
    pub fn encode(&self, tokens: &[String], framing: bool) -> Vec<usize> {
        let mut ids = Vec::new();
        if framing {
            ids.push(BOS);
        }
        ids.extend(self.bpe.apply(tokens).iter().map(|s| self.vocab.id(s)));
        if framing {
            ids.push(EOS);
        }
        ids
    }

    /// Joins subwords back into words; reserved framing ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            let tok = self.vocab.token(id)?;
            match id {
                PAD | BOS | EOS => continue,
                UNK => cur.push_str(tok),
                _ => {
                    if let Some(stem) = tok.strip_suffix(EOW) {
                        cur.push_str(stem);
                        words.push(std::mem::take(&mut cur));
                    } else {
                        cur.push_str(tok);
                    }
                }
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        Ok(words)
    }
}
