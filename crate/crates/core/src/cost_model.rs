//! FLOP accounting for the token baseline and the hierarchical model, corpus
//! length statistics, backbone compute matching and KV-cache sizing.
//!
//! Per-document costs are exact rationals: the only non-integer term is the
//! encoder/decoder attention cost under the equal-word-length assumption,
//! `2·d·(S_W + S)² / S_W`. Corpus aggregates are reported as `f64`, summed in
//! document order.

use std::io::{self, Write};
use std::ops::{Add, RangeInclusive};

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bpe::BpeVocab;
use crate::exec;
use crate::models::{BaselineConfig, HatConfig};
use crate::segmentation::{SegmentError, SplitterConfig};

/// Byte vocabulary of the hierarchical decoder head.
pub const BYTE_VOCAB: u64 = 256;

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.25;

/// Matches within this relative deviation are reported as successful.
pub const MATCH_TOLERANCE: f64 = 0.05;

pub type Flops = Ratio<u128>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("token statistics need a BPE vocabulary")]
    NoTokenStats,
    #[error("no candidate backbone in the search range")]
    NoCandidate,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

pub fn cost_ff(s: u64, d: u64) -> u128 {
    12 * s as u128 * (d as u128).pow(2)
}

pub fn cost_attn(s: u64, d: u64) -> u128 {
    2 * (s as u128).pow(2) * d as u128
}

/// Shape of a token-level baseline as seen by the cost formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineShape {
    pub layers: u64,
    pub hidden: u64,
    pub vocab: u64,
}

impl BaselineShape {
    pub fn new(layers: u64, hidden: u64, vocab: u64) -> Self {
        BaselineShape { layers, hidden, vocab }
    }

    pub fn from_config(cfg: &BaselineConfig) -> Self {
        Self::new(cfg.stack.layers as u64, cfg.stack.hidden as u64, cfg.vocab as u64)
    }

    /// Idealized non-embedding parameters, 12·L·D².
    pub fn backbone_params(&self) -> u128 {
        12 * self.layers as u128 * (self.hidden as u128).pow(2)
    }

    pub fn head_params(&self) -> u128 {
        self.hidden as u128 * self.vocab as u128
    }
}

/// Shape of a hierarchical model as seen by the cost formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierShape {
    pub backbone_layers: u64,
    pub backbone_hidden: u64,
    pub encoder_layers: u64,
    pub decoder_layers: u64,
    pub char_hidden: u64,
}

impl HierShape {
    /// Encoder and decoder share `char_layers`.
    pub fn new(backbone_layers: u64, backbone_hidden: u64, char_layers: u64, char_hidden: u64) -> Self {
        HierShape {
            backbone_layers,
            backbone_hidden,
            encoder_layers: char_layers,
            decoder_layers: char_layers,
            char_hidden,
        }
    }

    pub fn from_config(cfg: &HatConfig) -> Self {
        HierShape {
            backbone_layers: cfg.backbone.layers as u64,
            backbone_hidden: cfg.word_dim as u64,
            encoder_layers: cfg.encoder.layers as u64,
            decoder_layers: cfg.decoder.layers as u64,
            char_hidden: cfg.char_dim as u64,
        }
    }

    /// Backbone with `n` heads and `n` layers of width `head_size`.
    pub fn with_square_backbone(&self, n: u64, head_size: u64) -> Self {
        HierShape {
            backbone_layers: n,
            backbone_hidden: n * head_size,
            ..*self
        }
    }

    fn char_layers(&self) -> u128 {
        (self.encoder_layers + self.decoder_layers) as u128
    }
}

/// Lengths of one document: bytes, BPE tokens and words (without `[S]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocLengths {
    pub bytes: u64,
    pub tokens: Option<u64>,
    pub words: u64,
}

impl DocLengths {
    pub fn new(bytes: u64, tokens: u64, words: u64) -> Self {
        DocLengths {
            bytes,
            tokens: Some(tokens),
            words,
        }
    }

    fn tokens(&self) -> Result<u64, CostError> {
        self.tokens.ok_or(CostError::NoTokenStats)
    }
}

/// FLOPs of one forward pass, split by term. Baseline reports leave the
/// encoder/decoder, projection and decoder-head terms at zero; hierarchical
/// reports leave `head` at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub backbone_ff: Flops,
    pub backbone_attn: Flops,
    pub char_ff: Flops,
    pub char_attn: Flops,
    pub projections: Flops,
    pub head: Flops,
    pub decoder_head: Flops,
    pub bytes: u64,
}

impl CostReport {
    pub fn zero() -> Self {
        CostReport {
            backbone_ff: Flops::zero(),
            backbone_attn: Flops::zero(),
            char_ff: Flops::zero(),
            char_attn: Flops::zero(),
            projections: Flops::zero(),
            head: Flops::zero(),
            decoder_head: Flops::zero(),
            bytes: 0,
        }
    }

    pub fn terms(&self) -> [(&'static str, Flops); 7] {
        [
            ("backbone_ff", self.backbone_ff),
            ("backbone_attn", self.backbone_attn),
            ("char_ff", self.char_ff),
            ("char_attn", self.char_attn),
            ("projections", self.projections),
            ("head", self.head),
            ("decoder_head", self.decoder_head),
        ]
    }

    pub fn total(&self) -> Flops {
        self.terms().iter().fold(Flops::zero(), |acc, (_, t)| acc + t)
    }

    /// The parameter-count approximation: feed-forward terms plus the
    /// baseline LM head.
    pub fn approximate(&self) -> Flops {
        self.backbone_ff + self.char_ff + self.head
    }

    pub fn total_f64(&self) -> f64 {
        ratio_f64(self.total())
    }

    pub fn per_byte(&self) -> f64 {
        self.total_f64() / self.bytes as f64
    }
}

impl Add for CostReport {
    type Output = CostReport;

    fn add(self, o: CostReport) -> CostReport {
        CostReport {
            backbone_ff: self.backbone_ff + o.backbone_ff,
            backbone_attn: self.backbone_attn + o.backbone_attn,
            char_ff: self.char_ff + o.char_ff,
            char_attn: self.char_attn + o.char_attn,
            projections: self.projections + o.projections,
            head: self.head + o.head,
            decoder_head: self.decoder_head + o.decoder_head,
            bytes: self.bytes + o.bytes,
        }
    }
}

pub fn ratio_f64(r: Flops) -> f64 {
    r.numer().to_f64().unwrap_or(f64::INFINITY) / r.denom().to_f64().unwrap_or(f64::INFINITY)
}

pub fn cost_baseline_doc(shape: &BaselineShape, doc: &DocLengths) -> Result<CostReport, CostError> {
    let st = doc.tokens()?;
    let l = shape.layers as u128;
    Ok(CostReport {
        backbone_ff: Flops::from_integer(l * cost_ff(st, shape.hidden)),
        backbone_attn: Flops::from_integer(l * cost_attn(st, shape.hidden)),
        head: Flops::from_integer(st as u128 * shape.head_params()),
        bytes: doc.bytes,
        ..CostReport::zero()
    })
}

/// Cost of one document. Every word is taken to have length `S / S_W`; a
/// document without words is costed as a single word.
pub fn cost_hierarchical_doc(shape: &HierShape, doc: &DocLengths) -> CostReport {
    let s = doc.bytes as u128;
    let sw = doc.words.max(1) as u128;
    let d = shape.char_hidden as u128;
    let lb = shape.backbone_layers as u128;
    let lc = shape.char_layers();
    // S_W · C(1 + S/S_W, d) for each encoder/decoder layer.
    let per_layer_ff = 12 * d * d * (sw + s);
    let per_layer_attn = Flops::new(2 * d * (sw + s) * (sw + s), sw);
    CostReport {
        backbone_ff: Flops::from_integer(lb * cost_ff(sw as u64, shape.backbone_hidden)),
        backbone_attn: Flops::from_integer(lb * cost_attn(sw as u64, shape.backbone_hidden)),
        char_ff: Flops::from_integer(lc * per_layer_ff),
        char_attn: per_layer_attn * Flops::from_integer(lc),
        projections: Flops::from_integer(2 * sw * shape.backbone_hidden as u128 * d),
        decoder_head: Flops::from_integer((s + sw) * d * BYTE_VOCAB as u128),
        bytes: doc.bytes,
        ..CostReport::zero()
    }
}

/// Corpus-level cost: per-document reports and their ordered sum.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusCost {
    pub docs: Vec<CostReport>,
    pub total: f64,
    pub approximate: f64,
    pub bytes: u64,
}

impl CorpusCost {
    fn from_docs(docs: Vec<CostReport>) -> Self {
        let total = docs.iter().map(CostReport::total_f64).sum();
        let approximate = docs.iter().map(|r| ratio_f64(r.approximate())).sum();
        let bytes = docs.iter().map(|r| r.bytes).sum();
        CorpusCost {
            docs,
            total,
            approximate,
            bytes,
        }
    }

    pub fn mean(&self) -> f64 {
        self.total / self.docs.len().max(1) as f64
    }

    pub fn per_byte(&self) -> f64 {
        self.total / self.bytes as f64
    }

    pub fn approximate_per_byte(&self) -> f64 {
        self.approximate / self.bytes as f64
    }
}

pub fn cost_baseline_exact(shape: &BaselineShape, docs: &[DocLengths]) -> Result<CorpusCost, CostError> {
    let docs = exec::map(docs, |d| cost_baseline_doc(shape, d)).into_iter().collect::<Result<_, _>>()?;
    Ok(CorpusCost::from_docs(docs))
}

pub fn cost_hierarchical_exact(shape: &HierShape, docs: &[DocLengths]) -> CorpusCost {
    CorpusCost::from_docs(exec::map(docs, |d| cost_hierarchical_doc(shape, d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = f64>, bin_width: f64) -> Self {
        let mut counts = Vec::new();
        for v in values {
            let bin = (v / bin_width).floor().max(0.0) as usize;
            if bin >= counts.len() {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
        }
        Histogram { bin_width, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            let lo = i as f64 * self.bin_width;
            writeln!(w, "{},{},{}", lo, lo + self.bin_width, c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOptions {
    /// Number of documents to sample without replacement; `None` keeps all.
    pub sample: Option<usize>,
    pub seed: u64,
    pub bin_width: f64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            sample: None,
            seed: 0,
            bin_width: HISTOGRAM_BIN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    /// Indices into the input corpus, parallel to `docs`.
    pub doc_ids: Vec<usize>,
    pub docs: Vec<DocLengths>,
    pub bpw_hist: Histogram,
    pub bpt_hist: Option<Histogram>,
}

impl CorpusStats {
    pub fn from_docs(docs: Vec<DocLengths>, bin_width: f64) -> Self {
        let bpw_hist = Histogram::from_values(
            docs.iter().filter(|d| d.words > 0).map(|d| d.bytes as f64 / d.words as f64),
            bin_width,
        );
        let bpt_hist = if docs.iter().all(|d| d.tokens.is_some()) {
            Some(Histogram::from_values(
                docs.iter()
                    .filter_map(|d| d.tokens.filter(|&t| t > 0).map(|t| d.bytes as f64 / t as f64)),
                bin_width,
            ))
        } else {
            None
        };
        CorpusStats {
            doc_ids: (0..docs.len()).collect(),
            docs,
            bpw_hist,
            bpt_hist,
        }
    }

    /// `n` identical documents of `bytes` bytes at the given rates.
    pub fn from_rates(n: usize, bytes: u64, bytes_per_token: f64, bytes_per_word: f64) -> Self {
        let doc = DocLengths::new(
            bytes,
            (bytes as f64 / bytes_per_token).round() as u64,
            (bytes as f64 / bytes_per_word).round() as u64,
        );
        Self::from_docs(vec![doc; n], HISTOGRAM_BIN_WIDTH)
    }

    pub fn sample_size(&self) -> usize {
        self.docs.len()
    }

    pub fn has_tokens(&self) -> bool {
        self.bpt_hist.is_some()
    }

    pub fn total_bytes(&self) -> u64 {
        self.docs.iter().map(|d| d.bytes).sum()
    }

    pub fn total_words(&self) -> u64 {
        self.docs.iter().map(|d| d.words).sum()
    }

    pub fn total_tokens(&self) -> Result<u64, CostError> {
        self.docs.iter().map(|d| d.tokens()).sum()
    }

    pub fn mean_bytes(&self) -> f64 {
        self.total_bytes() as f64 / self.docs.len().max(1) as f64
    }

    pub fn mean_words(&self) -> f64 {
        self.total_words() as f64 / self.docs.len().max(1) as f64
    }

    pub fn mean_tokens(&self) -> Result<f64, CostError> {
        Ok(self.total_tokens()? as f64 / self.docs.len().max(1) as f64)
    }

    /// Corpus bytes per word.
    pub fn bytes_per_word(&self) -> f64 {
        self.total_bytes() as f64 / self.total_words() as f64
    }

    pub fn bytes_per_token(&self) -> Result<f64, CostError> {
        Ok(self.total_bytes() as f64 / self.total_tokens()? as f64)
    }

    /// Reads the `doc_id,bytes,words,tokens` format of [`CorpusStats::write_csv`].
    pub fn read_csv(text: &str, bin_width: f64) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("doc_id,bytes,words,tokens") {
            return Err("expected header doc_id,bytes,words,tokens".into());
        }
        let mut ids = Vec::new();
        let mut docs = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| format!("line {}: bad number {s:?}", n + 2));
            if f.len() != 4 {
                return Err(format!("line {}: expected 4 fields", n + 2));
            }
            ids.push(num(f[0])? as usize);
            docs.push(DocLengths {
                bytes: num(f[1])?,
                words: num(f[2])?,
                tokens: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            });
        }
        let mut stats = Self::from_docs(docs, bin_width);
        stats.doc_ids = ids;
        Ok(stats)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "doc_id,bytes,words,tokens")?;
        for (id, d) in self.doc_ids.iter().zip(&self.docs) {
            let tokens = d.tokens.map(|t| t.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", id, d.bytes, d.words, tokens)?;
        }
        Ok(())
    }
}

/// Lengths of every (sampled) document. Token counts are absent without a
/// vocabulary.
pub fn corpus_stats<T: AsRef<[u8]> + Sync>(
    corpus: &[T],
    splitter: &SplitterConfig,
    vocab: Option<&BpeVocab>,
    opts: &StatsOptions,
) -> Result<CorpusStats, CostError> {
    let mut ids: Vec<usize> = (0..corpus.len()).collect();
    if let Some(n) = opts.sample.filter(|&n| n < corpus.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        ids.shuffle(&mut rng);
        ids.truncate(n);
        ids.sort_unstable();
    }
    let docs = exec::map(&ids, |&i| -> Result<DocLengths, CostError> {
        let text = corpus[i].as_ref();
        let words = splitter.split(text)?.num_real_words() as u64;
        Ok(DocLengths {
            bytes: text.len() as u64,
            tokens: vocab.map(|v| v.encode(text).len() as u64),
            words,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut stats = CorpusStats::from_docs(docs, opts.bin_width);
    stats.doc_ids = ids;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Backbone heads and layers of the chosen candidate.
    pub size: u64,
    pub shape: HierShape,
    /// Mean per-document costs.
    pub baseline_cost: f64,
    pub hierarchical_cost: f64,
    pub deviation: f64,
    /// Every candidate with its mean per-document cost, in search order.
    pub candidates: Vec<(u64, f64)>,
}

impl MatchResult {
    pub fn within_tolerance(&self) -> bool {
        self.deviation < MATCH_TOLERANCE
    }
}

/// Picks the square backbone (heads = layers = n, width n·head_size) whose
/// mean exact cost is closest to the baseline's. Ties go to the smaller n.
pub fn match_backbone(
    baseline: &BaselineShape,
    enc_dec: &HierShape,
    head_size: u64,
    stats: &CorpusStats,
    range: RangeInclusive<u64>,
) -> Result<MatchResult, CostError> {
    if stats.docs.is_empty() {
        return Err(CostError::EmptyCorpus);
    }
    let target = cost_baseline_exact(baseline, &stats.docs)?.mean();
    let sizes: Vec<u64> = range.filter(|&n| n > 0).collect();
    let costs = exec::map(&sizes, |&n| {
        cost_hierarchical_exact(&enc_dec.with_square_backbone(n, head_size), &stats.docs).mean()
    });
    let candidates: Vec<(u64, f64)> = sizes.into_iter().zip(costs).collect();
    let &(size, cost) = candidates
        .iter()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .ok_or(CostError::NoCandidate)?;
    Ok(MatchResult {
        size,
        shape: enc_dec.with_square_backbone(size, head_size),
        baseline_cost: target,
        hierarchical_cost: cost,
        deviation: (cost - target).abs() / target,
        candidates,
    })
}

/// KV-cache size of the hierarchical backbone relative to the baseline,
/// Σ S_W·L_h·D_h / Σ S_T·L_b·D_b.
pub fn kv_cache_ratio(baseline: &BaselineShape, hier: &HierShape, stats: &CorpusStats) -> Result<f64, CostError> {
    let tokens = stats.total_tokens()? as f64;
    let words = stats.total_words() as f64;
    let h = (hier.backbone_layers * hier.backbone_hidden) as f64;
    let b = (baseline.layers * baseline.hidden) as f64;
    Ok(words * h / (tokens * b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentationRow {
    pub corpus: String,
    pub bytes_per_token: f64,
    pub bytes_per_word: f64,
    /// Baseline over hierarchical exact cost per byte.
    pub exact_ratio: f64,
    /// Same ratio under the feed-forward approximation.
    pub approximate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentationReport {
    pub rows: Vec<FragmentationRow>,
}

impl FragmentationReport {
    /// Out-of-domain cost ratio divided by the in-domain one.
    pub fn shift(&self) -> f64 {
        self.rows[1].exact_ratio / self.rows[0].exact_ratio
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "corpus,bytes_per_token,bytes_per_word,exact_ratio,approximate_ratio")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.corpus, r.bytes_per_token, r.bytes_per_word, r.exact_ratio, r.approximate_ratio
            )?;
        }
        Ok(())
    }
}

fn fragmentation_row(
    name: &str,
    stats: &CorpusStats,
    baseline: &BaselineShape,
    hier: &HierShape,
) -> Result<FragmentationRow, CostError> {
    let b = cost_baseline_exact(baseline, &stats.docs)?;
    let h = cost_hierarchical_exact(hier, &stats.docs);
    Ok(FragmentationRow {
        corpus: name.to_string(),
        bytes_per_token: stats.bytes_per_token()?,
        bytes_per_word: stats.bytes_per_word(),
        exact_ratio: b.per_byte() / h.per_byte(),
        approximate_ratio: b.approximate_per_byte() / h.approximate_per_byte(),
    })
}

pub fn fragmentation_report(
    in_domain: &CorpusStats,
    out_domain: &CorpusStats,
    baseline: &BaselineShape,
    hier: &HierShape,
) -> Result<FragmentationReport, CostError> {
    Ok(FragmentationReport {
        rows: vec![
            fragmentation_row("in_domain", in_domain, baseline, hier)?,
            fragmentation_row("out_of_domain", out_domain, baseline, hier)?,
        ],
    })
}

/// Forward calls needed to generate a corpus with KV caching: one baseline
/// call per token against one backbone call per word, one encoder call per
/// word (skipped on a word-cache hit) and one decoder call per byte.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceCalls {
    pub baseline: u64,
    pub encoder: f64,
    pub backbone: u64,
    pub decoder: u64,
}

pub fn inference_calls(stats: &CorpusStats, word_cache_hit_rate: f64) -> Result<InferenceCalls, CostError> {
    let words = stats.total_words();
    Ok(InferenceCalls {
        baseline: stats.total_tokens()?,
        encoder: words as f64 * (1.0 - word_cache_hit_rate),
        backbone: words,
        decoder: stats.total_bytes() + words,
    })
}
