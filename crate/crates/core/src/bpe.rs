//! Byte-level BPE: training, encoding and decoding.
//!
//! Pair counting never crosses whitespace-word boundaries, so the tokenizer
//! sees the same pre-segmentation as the hierarchical model. Among equally
//! frequent pairs the lexicographically smallest `(left_bytes, right_bytes)`
//! is merged first.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::exec;
use crate::segmentation::split_whitespace;

pub const BASE_VOCAB: usize = 256;
pub const DEFAULT_VOCAB_SIZE: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BpeError {
    #[error("vocab size {0} leaves no room for merges (need at least 257)")]
    VocabTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("vocab file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpeWarning {
    /// No pair occurred at least twice before the target size was reached.
    CorpusTooSmall { reached: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    token_bytes: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: BpeVocab,
    pub warning: Option<BpeWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub source_len: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl BpeVocab {
    /// The byte-only vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, BpeError> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = token_bytes.len() as u32;
            if l >= next || r >= next {
                return Err(BpeError::Format(format!(
                    "merge {rank} references token not yet defined"
                )));
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(BpeError::Format(format!("duplicate merge at rank {rank}")));
            }
        }
        Ok(BpeVocab {
            merges,
            token_bytes,
            ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Vocabulary restricted to the first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_merges(self.merges[..n.min(self.merges.len())].to_vec())
            .expect("prefix of a valid merge list is valid")
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_symbols(&mut syms, pair, BASE_VOCAB as u32 + rank);
        }
        out.extend_from_slice(&syms);
    }

    pub fn encode(&self, text: &[u8]) -> TokenSeq {
        let mut ids = Vec::with_capacity(text.len() / 2);
        for w in split_whitespace(text).words {
            self.encode_chunk(w.bytes(), &mut ids);
        }
        TokenSeq {
            ids,
            source_len: text.len(),
        }
    }

    /// Byte span `[start, end)` of every token of `tokens` in the source.
    pub fn token_spans(&self, tokens: &TokenSeq) -> Result<Vec<(usize, usize)>, BpeError> {
        let mut pos = 0;
        let mut spans = Vec::with_capacity(tokens.len());
        for &id in &tokens.ids {
            let len = self.token_bytes(id).ok_or(BpeError::UnknownToken(id))?.len();
            spans.push((pos, pos + len));
            pos += len;
        }
        Ok(spans)
    }

    pub fn decode(&self, tokens: &TokenSeq) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::with_capacity(tokens.source_len);
        for &id in &tokens.ids {
            out.extend_from_slice(self.token_bytes(id).ok_or(BpeError::UnknownToken(id))?);
        }
        Ok(out)
    }

    /// Serializes as `bpe-v1 <vocab_size>` followed by `rank\tleft\tright` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("bpe-v1 {}\n", self.vocab_size());
        for (rank, (l, r)) in self.merges.iter().enumerate() {
            let _ = writeln!(s, "{rank}\t{l}\t{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| BpeError::Format("empty file".into()))?;
        let size: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| BpeError::Format(format!("bad header {header:?}")))?;
        let mut merges = Vec::new();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed: Option<Vec<u32>> = fields.iter().map(|f| f.trim().parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[rank, l, r]) if rank as usize == i => merges.push((l, r)),
                _ => return Err(BpeError::Format(format!("bad merge line {line:?}"))),
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.vocab_size() != size {
            return Err(BpeError::Format(format!(
                "header says {size} tokens, merges give {}",
                vocab.vocab_size()
            )));
        }
        Ok(vocab)
    }
}

fn merge_symbols(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < syms.len() {
        if r + 1 < syms.len() && syms[r] == pair.0 && syms[r + 1] == pair.1 {
            syms[w] = new_id;
            r += 2;
        } else {
            syms[w] = syms[r];
            r += 1;
        }
        w += 1;
    }
    syms.truncate(w);
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn count_words<T: AsRef<[u8]> + Sync>(corpus: &[T]) -> Vec<(Vec<u8>, u64)> {
    let per_doc = exec::map(corpus, |doc| {
        let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for w in split_whitespace(doc.as_ref()).words {
            *counts.entry(w.bytes().to_vec()).or_default() += 1;
        }
        counts
    });
    let mut total: HashMap<Vec<u8>, u64> = HashMap::new();
    for counts in per_doc {
        for (w, c) in counts {
            *total.entry(w).or_default() += c;
        }
    }
    let mut words: Vec<(Vec<u8>, u64)> = total.into_iter().collect();
    words.sort_unstable();
    words
}

/// Greedy BPE training up to `vocab_size` tokens (256 byte tokens plus merges).
pub fn train_bpe<T: AsRef<[u8]> + Sync>(corpus: &[T], vocab_size: usize) -> Result<BpeTraining, BpeError> {
    if vocab_size <= BASE_VOCAB {
        return Err(BpeError::VocabTooSmall(vocab_size));
    }
    if corpus.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let words = count_words(corpus);
    let mut syms: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| w.iter().map(|&b| b as u32).collect())
        .collect();
    let freqs: Vec<u64> = words.iter().map(|(_, c)| *c).collect();

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_found: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (i, s) in syms.iter().enumerate() {
        for w in s.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += freqs[i];
            where_found.entry((w[0], w[1])).or_default().insert(i);
        }
    }
    let candidate = |pair: (u32, u32), count: u64, tb: &[Vec<u8>]| Candidate {
        count,
        left: tb[pair.0 as usize].clone(),
        right: tb[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(p, c, &token_bytes))
        .collect();

    let mut merges = Vec::new();
    let mut warning = None;
    while token_bytes.len() < vocab_size {
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if pair_counts.get(&c.pair).copied() == Some(c.count) => break Some(c),
                Some(_) => continue,
            }
        };
        let Some(best) = best.filter(|c| c.count >= 2) else {
            warning = Some(BpeWarning::CorpusTooSmall {
                reached: token_bytes.len(),
            });
            break;
        };
        let pair = best.pair;
        let new_id = token_bytes.len() as u32;
        let mut bytes = best.left;
        bytes.extend_from_slice(&best.right);
        token_bytes.push(bytes);
        merges.push(pair);

        let mut affected: Vec<usize> = where_found.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for i in affected {
            let f = freqs[i];
            for w in syms[i].windows(2) {
                let p = (w[0], w[1]);
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= f;
                }
                touched.insert(p);
            }
            merge_symbols(&mut syms[i], pair, new_id);
            for w in syms[i].windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += f;
                where_found.entry(p).or_default().insert(i);
                touched.insert(p);
            }
        }
        pair_counts.remove(&pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(0) => {
                    pair_counts.remove(&p);
                }
                Some(c) if p != pair => heap.push(candidate(p, c, &token_bytes)),
                _ => {}
            }
        }
    }
    let vocab = BpeVocab::from_merges(merges)?;
    Ok(BpeTraining { vocab, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let t = train_bpe(&["aaab", "aaab"], 258).unwrap();
        assert_eq!(t.vocab.merges()[0], (b'a' as u32, b'a' as u32));
        assert_eq!(t.vocab.vocab_size(), 258);
    }

    #[test]
    fn single_pair_corpus() {
        let corpus = vec!["xy"; 10];
        let t = train_bpe(&corpus, 257).unwrap();
        assert_eq!(t.vocab.merges(), &[(b'x' as u32, b'y' as u32)]);
        assert!(t.warning.is_none());
    }

    #[test]
    fn too_small_vocab_and_corpus() {
        assert_eq!(train_bpe(&["abc"], 256).unwrap_err(), BpeError::VocabTooSmall(256));
        assert_eq!(train_bpe::<&str>(&[], 300).unwrap_err(), BpeError::EmptyCorpus);
        let t = train_bpe(&["ab"], 300).unwrap();
        assert_eq!(t.warning, Some(BpeWarning::CorpusTooSmall { reached: 256 }));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice
        let t = train_bpe(&["cd ab", "ab cd"], 257).unwrap();
        assert_eq!(t.vocab.merges()[0], (b'a' as u32, b'b' as u32));
    }

    #[test]
    fn merges_do_not_cross_words() {
        let t = train_bpe(&["a b a b a b"], 300).unwrap();
        for id in 256..t.vocab.vocab_size() as u32 {
            let bytes = t.vocab.token_bytes(id).unwrap();
            assert!(!bytes[..bytes.len() - 1].contains(&b' '), "{bytes:?}");
        }
    }

    #[test]
    fn encode_compresses_training_text() {
        let text = "the cat sat on the mat and the cat ate the rat";
        let t = train_bpe(&[text], 300).unwrap();
        let enc = t.vocab.encode(text.as_bytes());
        assert!(enc.len() < text.len());
        assert_eq!(t.vocab.decode(&enc).unwrap(), text.as_bytes());
        assert!(t.vocab.decode(&TokenSeq { ids: vec![], source_len: 0 }).unwrap().is_empty());
        assert_eq!(
            t.vocab.decode(&TokenSeq { ids: vec![9999], source_len: 1 }),
            Err(BpeError::UnknownToken(9999))
        );
    }

    #[test]
    fn text_format_roundtrip() {
        let t = train_bpe(&["hello hello world world"], 270).unwrap();
        let s = t.vocab.to_text();
        assert!(s.starts_with(&format!("bpe-v1 {}\n", t.vocab.vocab_size())));
        assert_eq!(BpeVocab::from_text(&s).unwrap(), t.vocab);
        assert!(BpeVocab::from_text("bpe-v2 256\n").is_err());
        assert!(BpeVocab::from_text("bpe-v1 258\n0\t1\t2\n").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<String> = (0..50).map(|i| format!("word{} other{} the end", i % 7, i % 3)).collect();
        let a = train_bpe(&corpus, 320).unwrap().vocab;
        let b = exec::with_mode(exec::Mode::Sequential, || train_bpe(&corpus, 320).unwrap().vocab);
        assert_eq!(a, b);
    }

    #[test]
    fn more_merges_never_lengthen_training_docs() {
        let corpus = ["abracadabra abracadabra cadabra", "banana bandana abra"];
        let vocab = train_bpe(&corpus, 290).unwrap().vocab;
        for doc in corpus {
            let mut prev = usize::MAX;
            for n in 0..=vocab.merges().len() {
                let len = vocab.truncated(n).encode(doc.as_bytes()).len();
                assert!(len <= prev);
                prev = len;
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_random_bytes(b in proptest::collection::vec(any::<u8>(), 0..80)) {
            let vocab = train_bpe(&["aa bb aa bb ab ab"], 262).unwrap().vocab;
            let enc = vocab.encode(&b);
            prop_assert!(enc.ids.iter().all(|&i| (i as usize) < vocab.vocab_size()));
            prop_assert_eq!(vocab.decode(&enc).unwrap(), b);
        }
    }
}
