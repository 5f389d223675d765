//! Teacher-forced accuracy, bits per byte and text perturbations.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bpe::BpeVocab;
use crate::exec;
use crate::models::{BaselineConfig, BaselineParams, HatConfig, HatParams, ModelError};
use crate::numerics::{argmax, log_sum_exp, Real, Tape};
use crate::segmentation::{split_whitespace, SegmentError, SplitterConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trace has no predicted positions")]
    EmptyTrace,
    #[error("word boundaries do not fit a trace of {len} positions")]
    InconsistentBoundaries { len: usize },
    #[error("all-caps perturbation needs valid UTF-8")]
    InvalidUtf8,
    #[error("perturbation fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// Teacher-forced predictions over one document.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    /// Whether the argmax prediction at each position equals the target.
    pub correct: Vec<bool>,
    /// Natural-log probability of each target.
    pub log_probs: Vec<f64>,
    /// Source byte offset of each target.
    pub offsets: Vec<usize>,
    /// Positions judged together for word accuracy.
    pub words: Vec<Range<usize>>,
    /// UTF-8 bytes of the source text.
    pub n_bytes: usize,
}

impl PredictionTrace {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn byte_accuracy(&self) -> Result<f64, EvalError> {
        byte_accuracy(self)
    }

    pub fn word_accuracy(&self) -> Result<f64, EvalError> {
        word_accuracy(self, &self.words)
    }

    pub fn bits_per_byte(&self) -> Result<f64, EvalError> {
        bits_per_byte(self)
    }

    pub fn nats(&self) -> f64 {
        -self.log_probs.iter().sum::<f64>()
    }

    fn correct_words(&self) -> usize {
        self.words.iter().filter(|r| self.correct[(*r).clone()].iter().all(|&c| c)).count()
    }
}

/// First positions of consecutive words, starting at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordBoundaryIndex {
    starts: Vec<usize>,
}

impl WordBoundaryIndex {
    pub fn new(starts: Vec<usize>) -> Result<Self, EvalError> {
        let ok = starts.first() == Some(&0) && starts.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(EvalError::InconsistentBoundaries {
                len: starts.last().copied().unwrap_or(0),
            });
        }
        Ok(WordBoundaryIndex { starts })
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Partition of `0..len`, the last word running to the end.
    pub fn spans(&self, len: usize) -> Result<Vec<Range<usize>>, EvalError> {
        if self.starts.last().is_some_and(|&s| s >= len) {
            return Err(EvalError::InconsistentBoundaries { len });
        }
        let mut ends: Vec<usize> = self.starts[1..].to_vec();
        ends.push(len);
        Ok(self.starts.iter().zip(ends).map(|(&s, e)| s..e).collect())
    }
}

pub fn byte_accuracy(trace: &PredictionTrace) -> Result<f64, EvalError> {
    if trace.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    Ok(trace.correct.iter().filter(|&&c| c).count() as f64 / trace.len() as f64)
}

/// Fraction of words whose every position is correct.
pub fn word_accuracy(trace: &PredictionTrace, words: &[Range<usize>]) -> Result<f64, EvalError> {
    if trace.is_empty() || words.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    if words.iter().any(|r| r.start > r.end || r.end > trace.len()) {
        return Err(EvalError::InconsistentBoundaries { len: trace.len() });
    }
    let good = words.iter().filter(|r| trace.correct[(*r).clone()].iter().all(|&c| c)).count();
    Ok(good as f64 / words.len() as f64)
}

/// Σ −log₂ P over all predicted elements divided by the source byte count.
pub fn bits_per_byte(trace: &PredictionTrace) -> Result<f64, EvalError> {
    if trace.is_empty() || trace.n_bytes == 0 {
        return Err(EvalError::EmptyTrace);
    }
    Ok(trace.nats() / (trace.n_bytes as f64 * std::f64::consts::LN_2))
}

/// Metrics pooled over many documents: positions, words and bytes are
/// summed before dividing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub byte_accuracy: f64,
    pub word_accuracy: f64,
    pub bits_per_byte: f64,
    pub positions: usize,
    pub n_words: usize,
    pub n_bytes: usize,
}

pub fn summarize(traces: &[PredictionTrace]) -> Result<EvalSummary, EvalError> {
    let positions: usize = traces.iter().map(PredictionTrace::len).sum();
    let n_words: usize = traces.iter().map(|t| t.words.len()).sum();
    let n_bytes: usize = traces.iter().map(|t| t.n_bytes).sum();
    if positions == 0 || n_words == 0 || n_bytes == 0 {
        return Err(EvalError::EmptyTrace);
    }
    let correct: usize = traces.iter().map(|t| t.correct.iter().filter(|&&c| c).count()).sum();
    let good_words: usize = traces.iter().map(PredictionTrace::correct_words).sum();
    let nats: f64 = traces.iter().map(PredictionTrace::nats).sum();
    Ok(EvalSummary {
        byte_accuracy: correct as f64 / positions as f64,
        word_accuracy: good_words as f64 / n_words as f64,
        bits_per_byte: nats / (n_bytes as f64 * std::f64::consts::LN_2),
        positions,
        n_words,
        n_bytes,
    })
}

/// Argmax flag and target log-probability for each logit row.
fn score_rows<F: Real>(rows: &[F], width: usize, targets: &[usize]) -> (Vec<bool>, Vec<f64>) {
    let mut correct = Vec::with_capacity(targets.len());
    let mut log_probs = Vec::with_capacity(targets.len());
    for (row, &t) in rows.chunks(width).zip(targets) {
        correct.push(argmax(row) == t);
        log_probs.push((row[t] - log_sum_exp(row)).as_f64());
    }
    (correct, log_probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HatEvalOptions {
    /// Count the `[W]` and `[S]` terminator predictions as positions.
    pub include_terminators: bool,
}

impl Default for HatEvalOptions {
    fn default() -> Self {
        HatEvalOptions {
            include_terminators: true,
        }
    }
}

/// Teacher-forced trace of the hierarchical model. Each decoder block is one
/// word: the bytes of word `i` predicted from `p^{i−1}`, then its
/// terminator. The first word of a document has no block.
pub fn hat_trace<F: Real>(
    cfg: &HatConfig,
    params: &HatParams<F>,
    text: &[u8],
    opts: HatEvalOptions,
) -> Result<PredictionTrace, EvalError> {
    let doc = cfg.splitter.split_document(text)?;
    let starts = doc.word_starts();
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let fwd = vars.forward_document(cfg, &doc)?;
    let logits = fwd.logits.value();
    let (all_correct, all_lp) = score_rows(logits.data(), logits.cols(), &fwd.targets);

    let mut trace = PredictionTrace {
        correct: Vec::new(),
        log_probs: Vec::new(),
        offsets: Vec::new(),
        words: Vec::new(),
        n_bytes: text.len(),
    };
    for b in &fwd.blocks {
        let word = &doc.words[b.word];
        let begin = trace.len();
        let base = starts.get(b.word).copied().unwrap_or(text.len());
        for j in 0..b.len {
            let terminator = j + 1 == b.len;
            if terminator && !opts.include_terminators {
                continue;
            }
            trace.correct.push(all_correct[b.start + j]);
            trace.log_probs.push(all_lp[b.start + j]);
            trace.offsets.push(if word.is_end_of_doc() { text.len() } else { base + j });
        }
        if trace.len() > begin {
            trace.words.push(begin..trace.len());
        }
    }
    Ok(trace)
}

/// For each byte range in `words`, the indices of tokens overlapping it.
/// Words covered by no token get an empty range.
pub fn token_word_groups(token_spans: &[(usize, usize)], words: &[Range<usize>]) -> Vec<Range<usize>> {
    words
        .iter()
        .map(|w| {
            let first = token_spans.iter().position(|&(s, e)| s < w.end && e > w.start);
            match first {
                None => 0..0,
                Some(a) => {
                    let n = token_spans[a..].iter().take_while(|&&(s, _)| s < w.end).count();
                    a..a + n
                }
            }
        })
        .collect()
}

/// Teacher-forced trace of the token baseline. Position `i` predicts token
/// `i + 1`; a word is judged by every predicted token overlapping it, and
/// words overlapped only by the unpredicted first token are skipped.
pub fn baseline_trace<F: Real>(
    cfg: &BaselineConfig,
    params: &BaselineParams<F>,
    vocab: &BpeVocab,
    splitter: &SplitterConfig,
    text: &[u8],
) -> Result<PredictionTrace, EvalError> {
    let tokens = vocab.encode(text);
    let mut trace = PredictionTrace {
        correct: Vec::new(),
        log_probs: Vec::new(),
        offsets: Vec::new(),
        words: Vec::new(),
        n_bytes: text.len(),
    };
    if tokens.len() < 2 {
        return Ok(trace);
    }
    let spans = vocab.token_spans(&tokens).map_err(|_| ModelError::InvalidConfig("token outside vocabulary".into()))?;
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let logits = vars.logits(cfg, &tokens)?.value();
    let targets: Vec<usize> = tokens.ids[1..].iter().map(|&t| t as usize).collect();
    let n = targets.len();
    let (correct, log_probs) = score_rows(&logits.data()[..n * logits.cols()], logits.cols(), &targets);
    trace.correct = correct;
    trace.log_probs = log_probs;
    trace.offsets = spans[1..].iter().map(|&(s, _)| s).collect();

    let doc = splitter.split(text)?;
    let word_ranges: Vec<Range<usize>> = doc
        .word_starts()
        .iter()
        .zip(doc.words.iter())
        .map(|(&s, w)| s..s + w.len())
        .collect();
    for g in token_word_groups(&spans, &word_ranges) {
        let lo = g.start.max(1);
        if lo < g.end {
            trace.words.push(lo - 1..g.end - 1);
        }
    }
    Ok(trace)
}

pub fn hat_traces<F: Real, T: AsRef<[u8]> + Sync>(
    cfg: &HatConfig,
    params: &HatParams<F>,
    corpus: &[T],
    opts: HatEvalOptions,
) -> Result<Vec<PredictionTrace>, EvalError> {
    exec::map(corpus, |t| hat_trace(cfg, params, t.as_ref(), opts)).into_iter().collect()
}

pub fn baseline_traces<F: Real, T: AsRef<[u8]> + Sync>(
    cfg: &BaselineConfig,
    params: &BaselineParams<F>,
    vocab: &BpeVocab,
    splitter: &SplitterConfig,
    corpus: &[T],
) -> Result<Vec<PredictionTrace>, EvalError> {
    exec::map(corpus, |t| baseline_trace(cfg, params, vocab, splitter, t.as_ref())).into_iter().collect()
}

/// Any autoregressive next-byte predictor.
pub trait ByteModel {
    /// Probabilities of the next byte, indexed by byte value.
    fn next_byte_probs(&self, prefix: &[u8]) -> Vec<f64>;
}

/// Trace of a plain next-byte model: position `t` predicts byte `t + 1`
/// from bytes `0..=t`. Word `w` is judged on the predictions from its first
/// byte up to, but excluding, the prediction of the next word's first byte;
/// the last word is not judged.
pub fn byte_model_trace<M: ByteModel + ?Sized>(
    model: &M,
    text: &[u8],
    boundaries: &WordBoundaryIndex,
) -> Result<PredictionTrace, EvalError> {
    let n = text.len();
    if boundaries.starts().last().is_some_and(|&s| s >= n) {
        return Err(EvalError::InconsistentBoundaries { len: n });
    }
    let mut trace = PredictionTrace {
        correct: Vec::with_capacity(n.saturating_sub(1)),
        log_probs: Vec::with_capacity(n.saturating_sub(1)),
        offsets: (1..n).collect(),
        words: Vec::new(),
        n_bytes: n,
    };
    for t in 1..n {
        let probs = model.next_byte_probs(&text[..t]);
        let target = text[t] as usize;
        trace.correct.push(argmax(&probs) == target);
        trace.log_probs.push(probs[target].ln());
    }
    for w in boundaries.starts().windows(2) {
        trace.words.push(w[0]..w[1] - 1);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbKind {
    Permute,
    Randomize,
    Delete,
    AllCaps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub fraction: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub const DEFAULT_FRACTION: f64 = 0.1;

    pub fn new(kind: PerturbKind, seed: u64) -> Self {
        PerturbSpec {
            kind,
            fraction: Self::DEFAULT_FRACTION,
            seed,
        }
    }
}

/// Characters of a text: Unicode scalars for valid UTF-8, single bytes
/// otherwise.
fn chars_of(text: &[u8]) -> Vec<Vec<u8>> {
    match std::str::from_utf8(text) {
        Ok(s) => s.chars().map(|c| c.to_string().into_bytes()).collect(),
        Err(_) => text.iter().map(|&b| vec![b]).collect(),
    }
}

fn is_space(ch: &[u8]) -> bool {
    match std::str::from_utf8(ch) {
        Ok(s) => s.chars().all(char::is_whitespace),
        Err(_) => ch.iter().all(|b| b.is_ascii_whitespace()),
    }
}

/// Random cyclic permutation (no fixed points) of `items`.
fn sattolo<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..i);
        items.swap(i, j);
    }
}

fn perturb_word<R: Rng>(word: &[u8], spec: &PerturbSpec, rng: &mut R) -> Vec<u8> {
    let chars = chars_of(word);
    let lead = chars.iter().take_while(|c| is_space(c)).count();
    let trail = chars[lead..].iter().rev().take_while(|c| is_space(c)).count();
    let core_end = chars.len() - trail;
    let mut core: Vec<Vec<u8>> = chars[lead..core_end].to_vec();
    let l = core.len();
    let k = ((spec.fraction * l as f64).ceil() as usize).min(l);
    if k > 0 {
        match spec.kind {
            PerturbKind::Permute => {
                if l >= 2 {
                    let mut picked = sample(rng, l, k.max(2)).into_vec();
                    picked.sort_unstable();
                    let mut moved: Vec<Vec<u8>> = picked.iter().map(|&i| core[i].clone()).collect();
                    sattolo(&mut moved, rng);
                    for (&i, c) in picked.iter().zip(moved) {
                        core[i] = c;
                    }
                }
            }
            PerturbKind::Randomize => {
                for i in sample(rng, l, k) {
                    core[i] = vec![rng.gen_range(b'a'..=b'z')];
                }
            }
            PerturbKind::Delete => {
                let mut drop = vec![false; l];
                for i in sample(rng, l, k) {
                    drop[i] = true;
                }
                core = core.into_iter().zip(drop).filter(|(_, d)| !d).map(|(c, _)| c).collect();
            }
            PerturbKind::AllCaps => {}
        }
    }
    chars[..lead].iter().chain(core.iter()).chain(chars[core_end..].iter()).flatten().copied().collect()
}

/// Applies a perturbation word by word (whitespace words, surrounding
/// whitespace kept). `AllCaps` uppercases the whole text.
pub fn perturb(text: &[u8], spec: &PerturbSpec) -> Result<Vec<u8>, EvalError> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(EvalError::InvalidFraction(spec.fraction));
    }
    if spec.kind == PerturbKind::AllCaps {
        let s = std::str::from_utf8(text).map_err(|_| EvalError::InvalidUtf8)?;
        return Ok(s.to_uppercase().into_bytes());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let doc = split_whitespace(text);
    Ok(doc.words.iter().flat_map(|w| perturb_word(w.bytes(), spec, &mut rng)).collect())
}

/// Perturbs every document with its own stream, seeded from `spec.seed` and
/// the document index.
pub fn perturb_corpus<T: AsRef<[u8]> + Sync>(corpus: &[T], spec: &PerturbSpec) -> Result<Vec<Vec<u8>>, EvalError> {
    let docs: Vec<(usize, &[u8])> = corpus.iter().map(|t| t.as_ref()).enumerate().collect();
    exec::map(&docs, |&(i, t)| {
        let s = PerturbSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..*spec
        };
        perturb(t, &s)
    })
    .into_iter()
    .collect()
}
