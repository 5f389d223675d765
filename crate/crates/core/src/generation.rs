//! Nested-loop generation: the decoder emits bytes of the current word
//! until `[W]`, then the finished word runs through the encoder and one
//! backbone step before the next word is decoded.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{Frozen, HatConfig, HatParams, HatVars, ModelError};
use crate::numerics::{argmax, softmax_in_place, Real, Tape, Tensor};
use crate::segmentation::{SplitRule, Word, END_OF_DOC, WORD_MARKER};
use crate::transformer::{AttentionMask, KvCache, MaskMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Argmax; ties go to the lowest byte value.
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub max_new_bytes: usize,
    pub sampling: Sampling,
    pub seed: u64,
    /// Keep backbone keys/values between words instead of recomputing.
    pub kv_cache: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_new_bytes: 256,
            sampling: Sampling::Greedy,
            seed: 0,
            kv_cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The model emitted `[S]`, or `[W]` with nothing in the current word.
    EndOfDoc,
    Budget,
    EmptyPrompt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated bytes.
    pub bytes: Vec<u8>,
    pub prompt_len: usize,
    pub stop: StopReason,
    /// Words closed by the length cap rather than by `[W]`.
    pub forced_boundaries: usize,
}

impl Generation {
    pub fn generated(&self) -> &[u8] {
        &self.bytes[self.prompt_len..]
    }
}

/// Encoder outputs of the most frequent words.
pub struct WordCache<F: Real> {
    entries: HashMap<Vec<u8>, Vec<F>>,
    capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<F: Real> WordCache<F> {
    pub fn empty() -> Self {
        WordCache {
            entries: HashMap::new(),
            capacity: 0,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Caches the `capacity` most frequent words of `corpus` under the
    /// model's splitter; frequency ties go to the word seen first.
    pub fn build<T: AsRef<[u8]>>(
        cfg: &HatConfig,
        params: &HatParams<F>,
        corpus: &[T],
        capacity: usize,
    ) -> Result<Self, ModelError> {
        let mut counts: HashMap<Vec<u8>, (usize, usize)> = HashMap::new();
        let mut order = 0;
        for doc in corpus {
            let split = cfg
                .splitter
                .split(doc.as_ref())
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
            for w in split.words {
                let e = counts.entry(w.bytes().to_vec()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                e.0 += 1;
            }
        }
        let mut ranked: Vec<(Vec<u8>, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.truncate(capacity);
        let mut cache = WordCache {
            capacity,
            ..WordCache::empty()
        };
        if ranked.is_empty() {
            return Ok(cache);
        }
        let words: Vec<Word> = ranked.iter().map(|(b, _)| Word::new(b.clone())).collect();
        let frozen = Frozen::new(params);
        let tape = Tape::new();
        let vars = HatVars::from_vars(cfg, &frozen.bind(&tape));
        let refs: Vec<&Word> = words.iter().collect();
        let e = vars.encode_words(cfg, &refs)?.value();
        for (i, w) in words.into_iter().enumerate() {
            cache.entries.insert(w.bytes().to_vec(), e.row(i).to_vec());
        }
        Ok(cache)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &[u8]) -> bool {
        self.entries.contains_key(word)
    }

    pub fn get(&self, word: &[u8]) -> Option<&[F]> {
        let hit = self.entries.get(word).map(Vec::as_slice);
        let counter = if hit.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        hit
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Fraction of the words of `docs` that are cached. Counters are left
    /// untouched.
    pub fn hit_rate<T: AsRef<[u8]>>(&self, cfg: &HatConfig, docs: &[T]) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for d in docs {
            if let Ok(split) = cfg.splitter.split(d.as_ref()) {
                for w in &split.words {
                    total += 1;
                    hit += self.contains(w.bytes()) as usize;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Longest word the decoder may emit before `[W]` is forced.
pub fn word_cap(cfg: &HatConfig) -> usize {
    match cfg.splitter.rule {
        SplitRule::FixedSize(p) => p.min(cfg.splitter.max_word_len),
        _ => cfg.splitter.max_word_len,
    }
}

/// Generation state for one sequence.
pub struct GenState<'m, F: Real> {
    cfg: &'m HatConfig,
    frozen: Frozen<F>,
    word_cache: Option<&'m WordCache<F>>,
    kv: Option<KvCache<F>>,
    /// Completed words fed to the backbone so far.
    pub words: Vec<Word>,
    /// Word embeddings of `words`, used when recomputing without a cache.
    embeddings: Vec<Vec<F>>,
    /// Bytes of the word being decoded.
    pub partial: Vec<u8>,
    /// Predictive embedding of the last completed word.
    p_last: Option<Vec<F>>,
    sampling: Sampling,
    rng: ChaCha8Rng,
}

/// Outcome of one decoder step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Byte(u8),
    WordEnd,
    EndOfDoc,
}

impl<'m, F: Real> GenState<'m, F> {
    pub fn new(
        cfg: &'m HatConfig,
        params: &HatParams<F>,
        word_cache: Option<&'m WordCache<F>>,
        gen: &GenConfig,
    ) -> Self {
        GenState {
            cfg,
            frozen: Frozen::new(params),
            word_cache,
            kv: gen.kv_cache.then(|| KvCache::new(&cfg.backbone)),
            words: Vec::new(),
            embeddings: Vec::new(),
            partial: Vec::new(),
            p_last: None,
            sampling: gen.sampling,
            rng: ChaCha8Rng::seed_from_u64(gen.seed),
        }
    }

    pub fn kv_len(&self) -> usize {
        self.kv.as_ref().map_or(0, KvCache::len)
    }

    pub fn last_prediction(&self) -> Option<&[F]> {
        self.p_last.as_deref()
    }

    fn embed(&self, vars: &HatVars<'_, F>, words: &[Word]) -> Result<Vec<Vec<F>>, ModelError> {
        let mut out: Vec<Option<Vec<F>>> = words
            .iter()
            .map(|w| self.word_cache.and_then(|c| c.get(w.bytes())).map(<[F]>::to_vec))
            .collect();
        let missing: Vec<&Word> = words.iter().zip(&out).filter(|(_, e)| e.is_none()).map(|(w, _)| w).collect();
        if !missing.is_empty() {
            let e = vars.encode_words(self.cfg, &missing)?.value();
            let mut rows = (0..missing.len()).map(|i| e.row(i).to_vec());
            for slot in out.iter_mut().filter(|e| e.is_none()) {
                *slot = rows.next();
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every word embedded")).collect())
    }

    /// Feeds completed words through the encoder and backbone (word
    /// recursion) and updates the predictive embedding.
    pub fn push_words(&mut self, words: Vec<Word>) -> Result<(), ModelError> {
        if words.is_empty() {
            return Ok(());
        }
        let d = self.cfg.char_dim;
        let tape = Tape::new();
        let vars = HatVars::from_vars(self.cfg, &self.frozen.bind(&tape));
        let new = self.embed(&vars, &words)?;
        self.words.extend(words);
        let p = match self.kv.as_mut() {
            Some(kv) => {
                let x = tape.constant(Tensor::new(vec![new.len(), d], new.concat())?);
                let mask = AttentionMask::single(MaskMode::Causal, new.len());
                vars.backbone_forward(self.cfg, x, &mask, Some(kv))?
            }
            None => {
                self.embeddings.extend(new);
                let n = self.embeddings.len();
                let x = tape.constant(Tensor::new(vec![n, d], self.embeddings.concat())?);
                let mask = AttentionMask::single(MaskMode::Causal, n);
                vars.backbone_forward(self.cfg, x, &mask, None)?
            }
        };
        let p = p.value();
        self.p_last = Some(p.row(p.rows() - 1).to_vec());
        Ok(())
    }

    /// Closes the partial word and runs the word recursion.
    pub fn step_word(&mut self) -> Result<(), ModelError> {
        let word = Word::new(std::mem::take(&mut self.partial));
        self.push_words(vec![word])
    }

    /// Next-byte distribution logits given the partial word.
    pub fn next_logits(&self) -> Result<Vec<F>, ModelError> {
        let p = self.p_last.as_ref().ok_or(ModelError::NoTargets)?;
        let tape = Tape::new();
        let vars = HatVars::from_vars(self.cfg, &self.frozen.bind(&tape));
        let pv = tape.constant(Tensor::new(vec![1, self.cfg.char_dim], p.clone())?);
        let l = vars.decode_block(self.cfg, pv, &self.partial)?.value();
        Ok(l.row(l.rows() - 1).to_vec())
    }

    /// Samples one decoder output. A full word yields [`Step::WordEnd`]
    /// without consulting the model.
    pub fn step_char(&mut self) -> Result<Step, ModelError> {
        if self.partial.len() >= word_cap(self.cfg) {
            return Ok(Step::WordEnd);
        }
        let logits = self.next_logits()?;
        let b = match self.sampling {
            Sampling::Greedy => argmax(&logits),
            Sampling::Temperature(t) => {
                let mut probs: Vec<F> = logits.iter().map(|&l| l / F::from_f64(t)).collect();
                softmax_in_place(&mut probs);
                let u: f64 = self.rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p.as_f64();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        } as u8;
        Ok(match b {
            END_OF_DOC => Step::EndOfDoc,
            WORD_MARKER if self.partial.is_empty() => Step::EndOfDoc,
            WORD_MARKER => Step::WordEnd,
            b => {
                self.partial.push(b);
                Step::Byte(b)
            }
        })
    }
}

/// Continues `prompt` by up to `max_new_bytes` bytes. All prompt words but
/// the last are complete; the last one is extended before any new word
/// starts. A single-word prompt has nothing to condition its own bytes on,
/// so it is taken as complete.
pub fn generate<F: Real>(
    cfg: &HatConfig,
    params: &HatParams<F>,
    word_cache: Option<&WordCache<F>>,
    prompt: &[u8],
    gen: &GenConfig,
) -> Result<Generation, ModelError> {
    let mut out = Generation {
        bytes: prompt.to_vec(),
        prompt_len: prompt.len(),
        stop: StopReason::Budget,
        forced_boundaries: 0,
    };
    let split = cfg
        .splitter
        .split(prompt)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    if split.words.is_empty() {
        out.stop = StopReason::EmptyPrompt;
        return Ok(out);
    }
    if gen.max_new_bytes == 0 {
        return Ok(out);
    }
    let mut words = split.words;
    let mut state = GenState::new(cfg, params, word_cache, gen);
    if words.len() > 1 {
        state.partial = words.pop().expect("non-empty").bytes().to_vec();
    }
    state.push_words(words)?;
    let mut produced = 0;
    while produced < gen.max_new_bytes {
        let forced = state.partial.len() >= word_cap(cfg);
        match state.step_char()? {
            Step::Byte(b) => {
                out.bytes.push(b);
                produced += 1;
            }
            Step::WordEnd => {
                out.forced_boundaries += forced as usize;
                state.step_word()?;
            }
            Step::EndOfDoc => {
                out.stop = StopReason::EndOfDoc;
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::SplitterConfig;

    fn setup(seed: u64) -> (HatConfig, HatParams<f32>) {
        let cfg = HatConfig::new(8, 16, (1, 1, 1), 4, SplitterConfig::new(SplitRule::Whitespace, 6).unwrap());
        let p = HatParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        (cfg, p)
    }

    #[test]
    fn zero_budget_and_empty_prompt() {
        let (cfg, p) = setup(0);
        let g = GenConfig {
            max_new_bytes: 0,
            ..GenConfig::default()
        };
        let r = generate(&cfg, &p, None, b"hello wor", &g).unwrap();
        assert_eq!(r.bytes, b"hello wor");
        assert_eq!(r.stop, StopReason::Budget);
        let r = generate(&cfg, &p, None, b"", &GenConfig::default()).unwrap();
        assert_eq!(r.stop, StopReason::EmptyPrompt);
        assert!(r.bytes.is_empty());
    }

    #[test]
    fn halts_and_respects_cap() {
        let (cfg, p) = setup(1);
        let g = GenConfig {
            max_new_bytes: 40,
            ..GenConfig::default()
        };
        let r = generate(&cfg, &p, None, b"ab cd", &g).unwrap();
        assert!(r.generated().len() <= 40);
        // an untrained model rarely emits [W]; the cap closes words
        let cap = word_cap(&cfg);
        if r.stop == StopReason::Budget {
            assert!(r.forced_boundaries > 0 || r.generated().len() + 2 <= cap);
        }
    }

    #[test]
    fn greedy_tie_goes_to_lowest_byte() {
        let (cfg, mut p) = setup(2);
        p.lm_head = Tensor::zeros(p.lm_head.shape());
        let mut st = GenState::new(&cfg, &p, None, &GenConfig::default());
        st.push_words(vec![Word::new(b"x ".to_vec())]).unwrap();
        assert_eq!(st.step_char().unwrap(), Step::Byte(0));
    }

    #[test]
    fn temperature_sampling_is_reproducible() {
        let (cfg, p) = setup(3);
        let g = GenConfig {
            max_new_bytes: 30,
            sampling: Sampling::Temperature(1.0),
            seed: 7,
            kv_cache: true,
        };
        let a = generate(&cfg, &p, None, b"the cat", &g).unwrap();
        let b = generate(&cfg, &p, None, b"the cat", &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn caches_do_not_change_output() {
        let (cfg, p) = setup(4);
        let corpus = ["ab cd ab ef ab cd", "gh ab"];
        let wc = WordCache::build(&cfg, &p, &corpus, 3).unwrap();
        assert_eq!(wc.len(), 3);
        assert!(wc.contains(b"ab "));
        let full = GenConfig {
            max_new_bytes: 24,
            kv_cache: false,
            ..GenConfig::default()
        };
        let cached = GenConfig { kv_cache: true, ..full };
        for prompt in [&b"ab cd "[..], b"zz ab c", b"q"] {
            let a = generate(&cfg, &p, None, prompt, &full).unwrap();
            let b = generate(&cfg, &p, Some(&wc), prompt, &cached).unwrap();
            assert_eq!(a, b);
        }
        assert!(wc.hits() > 0);
        let none = WordCache::build(&cfg, &p, &corpus, 0).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn cached_embedding_is_bit_identical() {
        let (cfg, p) = setup(5);
        let wc = WordCache::build(&cfg, &p, &["one two one"], 8).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let e = v.encode_word(&cfg, &Word::new(b"two ".to_vec())).unwrap().value();
        assert_eq!(wc.get(b"two ").unwrap(), e.row(0));
    }

    #[test]
    fn hit_rate_is_monotone() {
        let (cfg, p) = setup(6);
        let corpus = ["a b c a b a d e f a"];
        let held = ["a b z z"];
        let mut last = 0.0;
        for n in 0..6 {
            let wc = WordCache::build(&cfg, &p, &corpus, n).unwrap();
            let r = wc.hit_rate(&cfg, &held);
            assert!((0.0..=1.0).contains(&r));
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn kv_cache_tracks_words() {
        let (cfg, p) = setup(7);
        let mut st = GenState::new(&cfg, &p, None, &GenConfig::default());
        st.push_words(vec![Word::new(b"a ".to_vec()), Word::new(b"b ".to_vec())]).unwrap();
        assert_eq!(st.kv_len(), 2);
        st.partial = b"c".to_vec();
        st.step_word().unwrap();
        assert_eq!(st.kv_len(), 3);
        assert_eq!(st.words.len(), 3);
    }
}
