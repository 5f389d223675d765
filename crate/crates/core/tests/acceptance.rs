//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Runs as a plain binary (`harness = false`) so the report prints in order
//! and the trained overfit model can be shared between criteria.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hat_core::bpe::{train_bpe, BpeVocab, TokenSeq};
use hat_core::cost_model::{
    cost_attn, cost_ff, cost_hierarchical_doc, fragmentation_report, kv_cache_ratio, match_backbone, BaselineShape,
    CorpusStats, DocLengths, HierShape,
};
use hat_core::evaluation::{byte_model_trace, hat_trace, ByteModel, HatEvalOptions, WordBoundaryIndex};
use hat_core::generation::{generate, GenConfig, StopReason, WordCache};
use hat_core::models::{BaselineConfig, BaselineParams, HatConfig, HatParams, HatVars, ModelError, Parameters};
use hat_core::numerics::gradcheck::{finite_diff_check, spread, GradCheck};
use hat_core::numerics::{log_sum_exp, Real, Tape, Tensor};
use hat_core::segmentation::{
    join, split_whitespace, SplitDocument, SplitRule, SplitterConfig, Word, END_OF_DOC, WORD_MARKER,
};
use hat_core::training::{hat_loss, lr_for, train_hat, AdamWConfig, LrSchedule, OptimizerState, TrainOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OVERFIT_TEXT: &[u8] = include_bytes!("data/overfit.txt");

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

fn whitespace() -> SplitterConfig {
    SplitterConfig::default()
}

fn fixed8() -> SplitterConfig {
    SplitterConfig::new(SplitRule::FixedSize(8), 64).unwrap()
}

fn rule_name(s: &SplitterConfig) -> String {
    s.rule.to_string()
}

// Random inputs

const POOL: &[&str] = &[
    "a", "e", "t", "o", "n", "s", "Z", "q", "7", "0", ".", ",", "!", "?", "'", "\"", "-", "(", ")", "é", "ß", "ø", "ñ",
    "中", "文", "字", "の", "ह", "ि", "\u{301}", "я", "Ж", "א", "ب", "😀", "👍", "\u{1F3FD}", "\u{200D}", "€", "№",
];
const SPACES: &[&str] = &[" ", " ", " ", "  ", "\n", "\t", "\r\n", "\u{A0}", "\u{3000}", "\u{2009}"];

fn random_utf8(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut s = String::new();
    let words = rng.gen_range(0..24);
    for _ in 0..words {
        for _ in 0..rng.gen_range(1..9) {
            s.push_str(POOL.choose(rng).unwrap());
        }
        if rng.gen_bool(0.9) {
            s.push_str(SPACES.choose(rng).unwrap());
        }
    }
    if rng.gen_bool(0.05) {
        s.push_str(&"x".repeat(rng.gen_range(60..200)));
    }
    s.into_bytes()
}

fn random_bytes(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = rng.gen_range(0..300);
    (0..n).map(|_| rng.gen()).collect()
}

fn fuzz_corpus() -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let text = (0..10_000).map(|_| random_utf8(&mut rng)).collect();
    let bytes = (0..1_000).map(|_| random_bytes(&mut rng)).collect();
    (text, bytes)
}

fn random_words(rng: &mut ChaCha8Rng, n: usize, splitter: &SplitterConfig) -> SplitDocument {
    let mut text = Vec::new();
    for _ in 0..n {
        for _ in 0..rng.gen_range(1..6) {
            text.push(rng.gen_range(b'a'..=b'z'));
        }
        text.push(b' ');
    }
    splitter.split_document(&text).unwrap()
}

// 1, 2

fn segmentation_lossless(text: &[Vec<u8>], bytes: &[Vec<u8>]) -> Check {
    let splitters = [
        SplitterConfig::new(SplitRule::Whitespace, 64).unwrap(),
        SplitterConfig::new(SplitRule::UnicodeWords, 64).unwrap(),
        fixed8(),
    ];
    let mut words = 0usize;
    for s in &splitters {
        for x in text {
            let d = s.split_document(x).map_err(|e| format!("{}: {e:?}", rule_name(s)))?;
            ensure(join(&d) == *x, || format!("{} lost bytes of {:?}", rule_name(s), String::from_utf8_lossy(x)))?;
            ensure(d.has_end_of_doc(), || "missing [S]".into())?;
            for w in d.words.iter().filter(|w| !w.is_end_of_doc()) {
                ensure(!w.bytes().contains(&WORD_MARKER) && !w.bytes().contains(&END_OF_DOC), || {
                    "special byte inside a word".into()
                })?;
                ensure(!w.is_empty() && w.len() <= s.max_word_len, || format!("word length {}", w.len()))?;
            }
            words += d.num_real_words();
        }
        let mut rejected = 0;
        for x in bytes {
            match s.split(x) {
                Ok(d) => ensure(join(&d) == *x, || format!("{} lost bytes", rule_name(s)))?,
                Err(_) if s.rule == SplitRule::UnicodeWords && std::str::from_utf8(x).is_err() => rejected += 1,
                Err(e) => return Err(format!("{}: {e:?}", rule_name(s))),
            }
        }
        if s.rule == SplitRule::UnicodeWords {
            ensure(rejected > 0, || "no invalid UTF-8 was rejected".into())?;
        }
    }
    Ok(format!(
        "{} UTF-8 docs + {} byte strings x 3 splitters, {words} words",
        text.len(),
        bytes.len()
    ))
}

fn bpe_roundtrip(text: &[Vec<u8>], bytes: &[Vec<u8>]) -> Check {
    let trained = train_bpe(&text[..2_000], 512).map_err(err)?.vocab;
    for vocab in [&trained, &BpeVocab::bytes_only()] {
        for x in text.iter().chain(bytes) {
            let t = vocab.encode(x);
            ensure(t.ids.iter().all(|&i| (i as usize) < vocab.vocab_size()), || "id out of range".into())?;
            let back = vocab.decode(&t).map_err(err)?;
            ensure(back == *x, || format!("roundtrip failed on {:?}", String::from_utf8_lossy(x)))?;
        }
    }
    let n: usize = text.iter().map(|x| trained.encode(x).len()).sum();
    let b: usize = text.iter().map(Vec::len).sum();
    Ok(format!(
        "{} inputs, vocab {} at {:.2} bytes/token",
        text.len() + bytes.len(),
        trained.vocab_size(),
        b as f64 / n as f64
    ))
}

// 3

fn gradient_check(splitter: SplitterConfig) -> Check {
    let cfg = HatConfig::new(8, 16, (1, 1, 1), 4, splitter);
    let p: HatParams<f64> = HatParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let mut params: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    spread(&mut params, 0.3, 5);
    let docs = [
        splitter.split_document("hé said: go  now\nok".as_bytes()).unwrap(),
        splitter.split_document(b"x yz").unwrap(),
    ];
    let report = finite_diff_check(
        |_, vars| {
            let hv = HatVars::from_vars(&cfg, vars);
            Ok::<_, ModelError>(hat_loss(&cfg, &hv, &docs)?.mean()?)
        },
        &params,
        GradCheck::default(),
    )
    .map_err(err)?;
    ensure(report.max_rel_error < 1e-4, || format!("{report:?}"))?;
    Ok(format!(
        "{}: max rel error {:.2e} over {} coordinates",
        rule_name(&splitter),
        report.max_rel_error,
        report.checked
    ))
}

// 4

struct Views {
    enc: Tensor<f64>,
    pred: Tensor<f64>,
    /// Logit rows of each decoder block, indexed by the predicted word.
    blocks: Vec<Option<Tensor<f64>>>,
}

fn views(cfg: &HatConfig, p: &HatParams<f64>, doc: &SplitDocument) -> Views {
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let words: Vec<&Word> = doc.words.iter().collect();
    let e = v.encode_words(cfg, &words).unwrap();
    let mask = hat_core::transformer::AttentionMask::single(hat_core::transformer::MaskMode::Causal, words.len());
    let pred = v.backbone_forward(cfg, e, &mask, None).unwrap().value();
    let f = v.forward_document(cfg, doc).unwrap();
    let logits = f.logits.value();
    let mut blocks = vec![None; doc.len()];
    for b in &f.blocks {
        blocks[b.word] = Some(logits.slice_rows(b.start, b.start + b.len));
    }
    Views {
        enc: e.value().as_ref().clone(),
        pred: pred.as_ref().clone(),
        blocks,
    }
}

fn with_byte(doc: &SplitDocument, word: usize, pos: usize, byte: u8) -> SplitDocument {
    let mut d = doc.clone();
    let mut b = d.words[word].bytes().to_vec();
    b[pos] = byte;
    d.words[word] = Word::new(b);
    d
}

fn information_flow(splitter: SplitterConfig) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let trials = 24;
    for trial in 0..trials {
        let d = [8, 16][rng.gen_range(0..2)];
        let w = [16, 32][rng.gen_range(0..2)];
        let layers = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
        let cfg = HatConfig::new(d, w, layers, 4, splitter);
        let p: HatParams<f64> = HatParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(trial));
        let n = rng.gen_range(3..8);
        let doc = random_words(&mut rng, n, &splitter);
        let base = views(&cfg, &p, &doc);
        let real = doc.num_real_words();
        let m = rng.gen_range(0..real);
        let len = doc.words[m].len();
        let k = rng.gen_range(0..len);
        let old = doc.words[m].bytes()[k];
        let new = if old == b'#' { b'%' } else { b'#' };
        let alt = views(&cfg, &p, &with_byte(&doc, m, k, new));
        let tag = |what: &str| format!("trial {trial}: {what} (word {m}, byte {k})");

        // (a) word embeddings are word-local
        for i in 0..doc.len() {
            let same = base.enc.row(i) == alt.enc.row(i);
            ensure(same == (i != m), || tag(&format!("e^{i} dependence")))?;
        }
        // (b) predictive embeddings see only the prefix of words
        for i in 0..doc.len() {
            let same = base.pred.row(i) == alt.pred.row(i);
            if i < m {
                ensure(same, || tag(&format!("p^{i} saw a later word")))?;
            } else {
                ensure(!same, || tag(&format!("p^{i} ignored an earlier word")))?;
            }
        }
        // (c) block rows see earlier words and earlier bytes of their own word
        for (wi, (a, b)) in base.blocks.iter().zip(&alt.blocks).enumerate() {
            let (Some(a), Some(b)) = (a, b) else { continue };
            if wi < m {
                ensure(a == b, || tag(&format!("block {wi} saw a later word")))?;
            } else if wi == m {
                for j in 0..a.rows() {
                    let same = a.row(j) == b.row(j);
                    ensure(same == (j <= k), || tag(&format!("block {wi} row {j}")))?;
                }
            }
        }
        // (d) the encoder is bidirectional: the last byte of word m reaches
        // the [W] slot, hence every row of the following block
        let last = len - 1;
        let old = doc.words[m].bytes()[last];
        let alt = views(&cfg, &p, &with_byte(&doc, m, last, if old == b'#' { b'%' } else { b'#' }));
        ensure(base.enc.row(m) != alt.enc.row(m), || tag("e^m ignored its last byte"))?;
        if let (Some(a), Some(b)) = (&base.blocks[m + 1], &alt.blocks[m + 1]) {
            for j in 0..a.rows() {
                ensure(a.row(j) != b.row(j), || tag(&format!("next block row {j} ignored word m")))?;
            }
        }
    }

    // baseline causality
    let cfg = BaselineConfig::new(40, 16, 2, 4);
    let p: BaselineParams<f64> = BaselineParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    for _ in 0..trials {
        let ids: Vec<u32> = (0..rng.gen_range(2..12)).map(|_| rng.gen_range(0..40)).collect();
        let t = rng.gen_range(0..ids.len());
        let mut other = ids.clone();
        other[t] = (other[t] + 1) % 40;
        let seq = |ids: &[u32]| TokenSeq {
            ids: ids.to_vec(),
            source_len: ids.len(),
        };
        let a = v.logits(&cfg, &seq(&ids)).map_err(err)?.value();
        let b = v.logits(&cfg, &seq(&other)).map_err(err)?.value();
        for r in 0..ids.len() {
            ensure((a.row(r) == b.row(r)) == (r < t), || format!("baseline row {r} vs token {t}"))?;
        }
    }
    Ok(format!("{}: {trials} random configs, 4 invariants + baseline causality", rule_name(&splitter)))
}

// 5

fn zero_head<F: Real>(splitter: SplitterConfig) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = HatConfig::new(16, 32, (1, 1, 1), 8, splitter);
    let mut p: HatParams<F> = HatParams::init(&cfg, &mut rng);
    p.lm_head = Tensor::zeros(p.lm_head.shape());
    let docs: Vec<SplitDocument> = (0..4).map(|_| random_words(&mut rng, 6, &splitter)).collect();
    let tape = Tape::new();
    let v = p.bind(&tape, false);
    let f = v.forward_batch(&cfg, &docs).map_err(err)?;
    let logits = f.logits.value();
    let mut worst = 0f64;
    for (r, &t) in f.targets.iter().enumerate() {
        let row = logits.row(r);
        let loss = (log_sum_exp(row) - row[t]).as_f64();
        worst = worst.max((loss - 256f64.ln()).abs());
    }
    // the f32 mean accumulates rounding over hundreds of positions
    if F::DTYPE == "f64" {
        let mean = hat_loss(&cfg, &v, &docs).map_err(err)?.mean().map_err(err)?.value().item().map_err(err)?;
        worst = worst.max((mean.as_f64() - 256f64.ln()).abs());
    }
    Ok(worst)
}

fn uniform_start(splitter: SplitterConfig) -> Check {
    let e64 = zero_head::<f64>(splitter)?;
    let e32 = zero_head::<f32>(splitter)?;
    ensure(e64 <= 1e-6 && e32 <= 1e-6, || format!("deviation f64 {e64:.2e}, f32 {e32:.2e}"))?;
    Ok(format!(
        "{}: |loss - ln 256| <= {:.1e} (f64), {:.1e} (f32)",
        rule_name(&splitter),
        e64,
        e32
    ))
}

// 6

struct Overfit {
    cfg: HatConfig,
    params: HatParams<f32>,
}

fn overfit(splitter: SplitterConfig) -> Result<(String, Overfit), String> {
    let cfg = HatConfig::new(64, 128, (1, 2, 1), 32, splitter);
    let mut params: HatParams<f32> = HatParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let heads = cfg.backbone.heads;
    let mut schedule = LrSchedule::new(lr_for(heads), 20, 200);
    schedule.floor_fraction = 0.1;
    let opts = TrainOptions {
        steps: 200,
        byte_budget: 16_384,
        schedule,
        adamw: AdamWConfig::default(),
    };
    let mut state = OptimizerState::new(opts.adamw, &params);
    let corpus = vec![OVERFIT_TEXT.to_vec()];
    let s = train_hat(&cfg, &mut params, &mut state, &corpus, &opts, 0, &mut |_| {}).map_err(err)?;
    let head: f64 = s.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = s.losses[s.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    ensure(tail < head, || format!("loss did not fall: {head:.3} -> {tail:.3}"))?;

    let trace = hat_trace(&cfg, &params, OVERFIT_TEXT, HatEvalOptions::default()).map_err(err)?;
    let word_acc = trace.word_accuracy().map_err(err)?;
    ensure(word_acc >= 0.99, || format!("word accuracy {word_acc:.4}"))?;

    let gen = GenConfig {
        max_new_bytes: OVERFIT_TEXT.len(),
        ..GenConfig::default()
    };
    let g = generate(&cfg, &params, None, &OVERFIT_TEXT[..8], &gen).map_err(err)?;
    ensure(g.bytes == OVERFIT_TEXT, || {
        let at = g.bytes.iter().zip(OVERFIT_TEXT).take_while(|(a, b)| a == b).count();
        format!("generation diverges at byte {at} of {}", OVERFIT_TEXT.len())
    })?;
    let detail = format!(
        "{}: {} bytes, lr {:.1e}, loss {:.3} -> {:.4}, word acc {:.4}, byte acc {:.4}, generation exact ({:?})",
        rule_name(&splitter),
        OVERFIT_TEXT.len(),
        lr_for(heads),
        s.first_loss,
        s.final_loss,
        word_acc,
        trace.byte_accuracy().map_err(err)?,
        g.stop
    );
    Ok((detail, Overfit { cfg, params }))
}

// 7-10

fn cost_fixtures() -> Check {
    ensure(cost_ff(4, 8) == 3072, || format!("cost_ff(4,8) = {}", cost_ff(4, 8)))?;
    ensure(cost_attn(4, 8) == 256, || format!("cost_attn(4,8) = {}", cost_attn(4, 8)))?;
    // three four-byte words, backbone 1 layer of width 8, en/decoder 1 layer of width 4
    let r = cost_hierarchical_doc(&HierShape::new(1, 8, 1, 4), &DocLengths::new(12, 5, 3));
    let hand: u128 = 12 * 3 * 64 // backbone ff
        + 2 * 9 * 8 // backbone attention
        + 2 * 12 * 16 * 15 // en+dec ff over S_W + S rows
        + 2 * 2 * 4 * 15 * 15 / 3 // en+dec attention, blocks of five rows
        + 2 * 3 * 8 * 4 // W_E and W_D
        + 15 * 4 * 256; // decoder head
    ensure(hand == 24_960, || format!("hand total {hand}"))?;
    let total = r.total();
    ensure(total.is_integer() && *total.numer() == hand, || format!("model total {total}"))?;
    Ok("3072, 256, hierarchical fixture 24960 (exact)".into())
}

fn table_stats() -> CorpusStats {
    let tokens = 4096u64;
    let bytes = (tokens as f64 * 4.35).round() as u64;
    let words = (tokens as f64 * 0.69).round() as u64;
    CorpusStats::from_docs(vec![DocLengths::new(bytes, tokens, words)], 0.25)
}

fn baseline(n: u64) -> BaselineShape {
    BaselineShape::new(n, n * 128, 65_536)
}

fn compute_matching() -> Check {
    let stats = table_stats();
    let mut out = Vec::new();
    for (n, heads, layers, want) in [(16, 6, 3, 18), (24, 6, 3, 28), (32, 8, 4, 36)] {
        let m = match_backbone(&baseline(n), &HierShape::new(0, 0, layers, heads * 128), 128, &stats, 1..=64)
            .map_err(err)?;
        ensure(m.size.abs_diff(want) <= 1 && m.deviation < 0.05, || {
            format!("{n}/{n}: got {} (deviation {:.4}), want {want} ± 1", m.size, m.deviation)
        })?;
        out.push(format!("{n}->{} ({:.1}%)", m.size, 100.0 * m.deviation));
    }
    Ok(out.join(", "))
}

fn kv_ratios() -> Check {
    let stats = table_stats();
    let mut out = Vec::new();
    for (n, size, heads, layers, want) in [(16, 18, 6, 3, 12.7), (24, 28, 6, 3, 6.1), (32, 36, 8, 4, 12.7)] {
        let h = HierShape::new(size, size * 128, layers, heads * 128);
        let r = kv_cache_ratio(&baseline(n), &h, &stats).map_err(err)?;
        let oracle = (stats.total_words() as f64 / stats.total_tokens().map_err(err)? as f64) * (size * size) as f64
            / (n * n) as f64;
        let cut = 100.0 * (1.0 - r);
        ensure((r - oracle).abs() < 1e-12, || format!("{n}: ratio {r} vs {oracle}"))?;
        ensure((cut - want).abs() < 0.05 && (6.0..=13.0).contains(&cut), || format!("{n}: {cut:.2}%"))?;
        out.push(format!("{cut:.1}%"));
    }
    Ok(format!("reductions {}", out.join(", ")))
}

fn fragmentation() -> Check {
    let base = baseline(24);
    let hier = HierShape::new(28, 28 * 128, 3, 768);
    let home = CorpusStats::from_rates(1, 17_818, 4.35, 4.35 / 0.69);
    let zh = CorpusStats::from_rates(1, 17_818, 1.02, 4.29);
    let rep = fragmentation_report(&home, &zh, &base, &hier).map_err(err)?;
    let row = &rep.rows[1];
    ensure((2.0..=3.0).contains(&row.approximate_ratio), || {
        format!("ratio {:.3} (all terms {:.3})", row.approximate_ratio, row.exact_ratio)
    })?;
    Ok(format!(
        "baseline/hierarchical cost {:.2} (all terms incl. attention {:.2})",
        row.approximate_ratio, row.exact_ratio
    ))
}

// 11

/// Next-byte distribution over a three-letter alphabet driven by the last
/// byte and the prefix length; every other byte gets a small floor.
struct ToyModel;

const ALPHABET: [u8; 3] = *b"ab ";

impl ByteModel for ToyModel {
    fn next_byte_probs(&self, prefix: &[u8]) -> Vec<f64> {
        let mut w = vec![1e-4; 256];
        let last = prefix.last().copied().unwrap_or(0) as usize;
        for (i, &c) in ALPHABET.iter().enumerate() {
            w[c as usize] = ((last * 7 + prefix.len() * 5 + i * 11) % 13) as f64 + 1.0 + 0.1 * i as f64;
        }
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }
}

fn brute_argmax(p: &[f64]) -> u8 {
    let mut best = 0;
    for b in 1..256 {
        if p[b] > p[best] {
            best = b;
        }
    }
    best as u8
}

fn greedy_rollout(m: &ToyModel, prefix: &[u8], steps: usize) -> Vec<u8> {
    let mut s = prefix.to_vec();
    for _ in 0..steps {
        let b = brute_argmax(&m.next_byte_probs(&s));
        s.push(b);
    }
    s[prefix.len()..].to_vec()
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<u8>| {
                ALPHABET.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn metric_oracle() -> Check {
    let m = ToyModel;
    let strings = all_strings(7);
    let (mut bytes_checked, mut words_checked, mut worst_bpb) = (0usize, 0usize, 0f64);
    for text in &strings {
        let starts = split_whitespace(text).word_starts();
        let idx = WordBoundaryIndex::new(starts.clone()).map_err(err)?;
        let trace = byte_model_trace(&m, text, &idx).map_err(err)?;
        let n = text.len();

        let mut hits = 0usize;
        let mut nats = 0f64;
        for t in 1..n {
            let p = m.next_byte_probs(&text[..t]);
            hits += (brute_argmax(&p) == text[t]) as usize;
            nats -= p[text[t] as usize].ln();
        }
        match trace.byte_accuracy() {
            Ok(acc) => ensure(acc == hits as f64 / (n - 1) as f64, || format!("byte acc on {text:?}"))?,
            Err(_) => ensure(n == 1, || format!("no byte accuracy on {text:?}"))?,
        }
        bytes_checked += n - 1;

        // a judged word is correct iff greedy decoding from its first byte
        // reproduces the rest of it
        let judged: Vec<bool> = starts
            .windows(2)
            .map(|w| greedy_rollout(&m, &text[..w[0] + 1], w[1] - w[0] - 1) == text[w[0] + 1..w[1]])
            .collect();
        match trace.word_accuracy() {
            Ok(acc) => {
                let good = judged.iter().filter(|&&c| c).count();
                ensure(acc == good as f64 / judged.len() as f64, || format!("word acc on {text:?}"))?;
            }
            Err(_) => ensure(judged.is_empty() || n == 1, || format!("no word accuracy on {text:?}"))?,
        }
        words_checked += judged.len();

        if n > 1 {
            let mean_loss = nats / (n - 1) as f64;
            let bpb = trace.bits_per_byte().map_err(err)?;
            let identity = mean_loss * (n - 1) as f64 / (n as f64 * LN_2);
            worst_bpb = worst_bpb.max((bpb - identity).abs());
        }
    }

    // the same identity for the hierarchical model, against the tape loss
    let cfg = HatConfig::new(8, 16, (1, 1, 1), 4, whitespace());
    let p: HatParams<f64> = HatParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(11));
    for text in [&b"the cat sat on the mat"[..], b"x", "na\u{ef}ve  caf\u{e9}\n".as_bytes()] {
        let trace = hat_trace(&cfg, &p, text, HatEvalOptions::default()).map_err(err)?;
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let l = hat_loss(&cfg, &v, &[cfg.splitter.split_document(text).unwrap()]).map_err(err)?;
        let mean = l.mean().map_err(err)?.value().item().map_err(err)?;
        let identity = mean * l.positions as f64 / (text.len() as f64 * LN_2);
        worst_bpb = worst_bpb.max((trace.bits_per_byte().map_err(err)? - identity).abs());
    }
    ensure(worst_bpb < 1e-9, || format!("bpb identity off by {worst_bpb:.2e}"))?;
    Ok(format!(
        "{} strings, {bytes_checked} predictions, {words_checked} judged words match; bpb identity within {worst_bpb:.1e}",
        strings.len()
    ))
}

// 12

fn generation_equivalence(model: &Overfit) -> Check {
    let (cfg, p) = (&model.cfg, &model.params);
    let cache = WordCache::build(cfg, p, &[OVERFIT_TEXT], 64).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let text_words: Vec<&[u8]> = OVERFIT_TEXT.split_inclusive(|&b| b == b' ').collect();
    let mut prompts = Vec::new();
    for i in 0..100 {
        let prompt: Vec<u8> = match i % 3 {
            0 => {
                let start = rng.gen_range(0..OVERFIT_TEXT.len() - 40);
                OVERFIT_TEXT[start..start + rng.gen_range(1..40)].to_vec()
            }
            1 => (0..rng.gen_range(1..6)).flat_map(|_| text_words.choose(&mut rng).unwrap().to_vec()).collect(),
            _ => {
                let mut s = Vec::new();
                for _ in 0..rng.gen_range(1..5) {
                    s.extend((0..rng.gen_range(1..7)).map(|_| rng.gen_range(b'a'..=b'z')));
                    s.push(b' ');
                }
                s.truncate(s.len() - rng.gen_range(0..2));
                s
            }
        };
        prompts.push(prompt);
    }
    let full = GenConfig {
        max_new_bytes: 48,
        kv_cache: false,
        ..GenConfig::default()
    };
    let kv = GenConfig { kv_cache: true, ..full };
    let mut stopped = 0;
    for prompt in &prompts {
        let reference = generate(cfg, p, None, prompt, &full).map_err(err)?;
        for (name, c, g) in [("kv", None, &kv), ("word cache", Some(&cache), &full), ("both", Some(&cache), &kv)] {
            let out = generate(cfg, p, c, prompt, g).map_err(err)?;
            ensure(out == reference, || format!("{name} differs on prompt {:?}", String::from_utf8_lossy(prompt)))?;
        }
        stopped += (reference.stop == StopReason::EndOfDoc) as usize;
    }
    ensure(cache.hits() > 0, || "word cache never hit".into())?;
    Ok(format!(
        "{} prompts x 3 cached variants identical; {} word-cache hits, {stopped} ended at [S]",
        prompts.len(),
        cache.hits()
    ))
}

// Runner

struct Criterion {
    id: &'static str,
    name: &'static str,
    limit: Duration,
}

fn report(c: &Criterion, r: Check, elapsed: Duration, failures: &mut usize) {
    let r = r.and_then(|d| {
        if elapsed > c.limit {
            Err(format!("{d}; took {elapsed:.1?}, limit {:?}", c.limit))
        } else {
            Ok(d)
        }
    });
    match r {
        Ok(d) => println!("PASS {:>2} {} [{elapsed:.1?}] {d}", c.id, c.name),
        Err(e) => {
            *failures += 1;
            println!("FAIL {:>2} {} [{elapsed:.1?}] {e}", c.id, c.name)
        }
    }
}

fn run<T>(c: Criterion, failures: &mut usize, f: impl FnOnce() -> Result<(String, T), String>) -> Option<T> {
    let t0 = Instant::now();
    let out = f();
    let elapsed = t0.elapsed();
    match out {
        Ok((d, v)) => {
            report(&c, Ok(d), elapsed, failures);
            Some(v)
        }
        Err(e) => {
            report(&c, Err(e), elapsed, failures);
            None
        }
    }
}

fn simple(c: Criterion, failures: &mut usize, f: impl FnOnce() -> Check) {
    run(c, failures, || f().map(|d| (d, ())));
}

const fn crit(id: &'static str, name: &'static str, secs: u64) -> Criterion {
    Criterion {
        id,
        name,
        limit: Duration::from_secs(secs),
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and similar probes pass flags; only run for real
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failures = 0;
    let (text, bytes) = fuzz_corpus();

    simple(crit("1", "segmentation losslessness", 60), &mut failures, || {
        segmentation_lossless(&text, &bytes)
    });
    simple(crit("2", "BPE roundtrip", 60), &mut failures, || bpe_roundtrip(&text, &bytes));
    simple(crit("3", "gradient fidelity", 300), &mut failures, || gradient_check(whitespace()));
    simple(crit("4", "information flow", 60), &mut failures, || information_flow(whitespace()));
    simple(crit("5", "uniform-start loss", 10), &mut failures, || uniform_start(whitespace()));
    let model = run(crit("6", "overfit reproduction", 600), &mut failures, || overfit(whitespace()));
    simple(crit("7", "cost-formula fixtures", 1), &mut failures, cost_fixtures);
    simple(crit("8", "compute matching", 10), &mut failures, compute_matching);
    simple(crit("9", "KV-cache ratios", 1), &mut failures, kv_ratios);
    simple(crit("10", "fragmentation arithmetic", 1), &mut failures, fragmentation);
    simple(crit("11", "metric oracle", 60), &mut failures, metric_oracle);
    simple(crit("12", "generation equivalence", 300), &mut failures, || match &model {
        Some(m) => generation_equivalence(m),
        None => Err("needs the model from criterion 6".into()),
    });
    simple(crit("13", "fixed 8-byte split (3-6)", 1000), &mut failures, || {
        let s = fixed8();
        let mut parts = vec![gradient_check(s)?, information_flow(s)?, uniform_start(s)?];
        parts.push(overfit(s)?.0);
        Ok(parts.join("; "))
    });

    println!("{} of 13 criteria passed", 13 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
