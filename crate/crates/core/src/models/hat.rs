use rand::Rng;

use super::{BoundParameters, ModelError, Parameters};
use crate::numerics::{init, Real, Tape, Tensor, Var};
use crate::segmentation::{SplitDocument, SplitterConfig, Word, BYTE_VOCAB, END_OF_DOC, WORD_MARKER};
use crate::transformer::{stack_forward, AttentionMask, KvCache, MaskMode, StackConfig, StackParams, StackVars};

/// Sizes of the three stacks plus the splitting rule the model was built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatConfig {
    /// Character dimension `d` of the encoder and decoder.
    pub char_dim: usize,
    /// Word dimension `D` of the backbone.
    pub word_dim: usize,
    pub encoder: StackConfig,
    pub backbone: StackConfig,
    pub decoder: StackConfig,
    pub splitter: SplitterConfig,
}

impl HatConfig {
    /// Builds a config where every stack uses `head_size`-wide heads.
    pub fn new(
        char_dim: usize,
        word_dim: usize,
        layers: (usize, usize, usize),
        head_size: usize,
        splitter: SplitterConfig,
    ) -> Self {
        let (enc, bb, dec) = layers;
        HatConfig {
            char_dim,
            word_dim,
            encoder: StackConfig::with_head_size(char_dim, enc, head_size, MaskMode::Bidirectional),
            backbone: StackConfig::with_head_size(word_dim, bb, head_size, MaskMode::Causal),
            decoder: StackConfig::with_head_size(char_dim, dec, head_size, MaskMode::Causal),
            splitter,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.encoder.hidden != self.char_dim || self.decoder.hidden != self.char_dim {
            return bad("encoder and decoder width must equal char_dim");
        }
        if self.backbone.hidden != self.word_dim {
            return bad("backbone width must equal word_dim");
        }
        if self.encoder.mask != MaskMode::Bidirectional {
            return bad("encoder must be bidirectional");
        }
        if self.backbone.mask != MaskMode::Causal || self.decoder.mask != MaskMode::Causal {
            return bad("backbone and decoder must be causal");
        }
        self.encoder.validate()?;
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.splitter
            .validate()
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    pub fn param_count(&self) -> u64 {
        let (d, w, v) = (self.char_dim as u64, self.word_dim as u64, BYTE_VOCAB as u64);
        2 * v * d + 2 * d * w + self.encoder.param_count() + self.backbone.param_count() + self.decoder.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HatParams<F: Real> {
    /// Character embedding table `C`, shared by encoder and decoder inputs.
    pub char_embed: Tensor<F>,
    pub encoder: StackParams<F>,
    /// `W_E`, `D × d`.
    pub w_e: Tensor<F>,
    pub backbone: StackParams<F>,
    /// `W_D`, `d × D`.
    pub w_d: Tensor<F>,
    pub decoder: StackParams<F>,
    /// Output head stored as `256 × d`.
    pub lm_head: Tensor<F>,
}

impl<F: Real> HatParams<F> {
    pub fn init<R: Rng>(cfg: &HatConfig, rng: &mut R) -> Self {
        let (d, w) = (cfg.char_dim, cfg.word_dim);
        HatParams {
            char_embed: init::normal(&[BYTE_VOCAB, d], init::INIT_STD, rng),
            encoder: StackParams::init(&cfg.encoder, rng),
            w_e: init::normal(&[w, d], init::INIT_STD, rng),
            backbone: StackParams::init(&cfg.backbone, rng),
            w_d: init::normal(&[d, w], init::INIT_STD, rng),
            decoder: StackParams::init(&cfg.decoder, rng),
            lm_head: init::normal(&[BYTE_VOCAB, d], init::INIT_STD, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> HatVars<'t, F> {
        let leaf = |t: &Tensor<F>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        HatVars {
            char_embed: leaf(&self.char_embed),
            encoder: self.encoder.bind(tape, trainable),
            w_e: leaf(&self.w_e),
            backbone: self.backbone.bind(tape, trainable),
            w_d: leaf(&self.w_d),
            decoder: self.decoder.bind(tape, trainable),
            lm_head: leaf(&self.lm_head),
        }
    }

    pub fn cast<G: Real>(&self) -> HatParams<G> {
        HatParams {
            char_embed: self.char_embed.cast(),
            encoder: cast_stack(&self.encoder),
            w_e: self.w_e.cast(),
            backbone: cast_stack(&self.backbone),
            w_d: self.w_d.cast(),
            decoder: cast_stack(&self.decoder),
            lm_head: self.lm_head.cast(),
        }
    }
}

pub(super) fn cast_stack<F: Real, G: Real>(s: &StackParams<F>) -> StackParams<G> {
    StackParams {
        layers: s
            .layers
            .iter()
            .map(|l| crate::transformer::LayerParams {
                attn_norm: l.attn_norm.cast(),
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                wv: l.wv.cast(),
                wo: l.wo.cast(),
                mlp_norm: l.mlp_norm.cast(),
                w_gate: l.w_gate.cast(),
                w_up: l.w_up.cast(),
                w_down: l.w_down.cast(),
            })
            .collect(),
        final_norm: s.final_norm.cast(),
    }
}

impl<F: Real> Parameters<F> for HatParams<F> {
    fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("char_embed".to_string(), &self.char_embed)];
        out.extend(self.encoder.named("encoder"));
        out.push(("w_e".into(), &self.w_e));
        out.extend(self.backbone.named("backbone"));
        out.push(("w_d".into(), &self.w_d));
        out.extend(self.decoder.named("decoder"));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.char_embed];
        out.extend(self.encoder.tensors_mut());
        out.push(&mut self.w_e);
        out.extend(self.backbone.tensors_mut());
        out.push(&mut self.w_d);
        out.extend(self.decoder.tensors_mut());
        out.push(&mut self.lm_head);
        out
    }
}

#[derive(Clone)]
pub struct HatVars<'t, F: Real> {
    pub char_embed: Var<'t, F>,
    pub encoder: StackVars<'t, F>,
    pub w_e: Var<'t, F>,
    pub backbone: StackVars<'t, F>,
    pub w_d: Var<'t, F>,
    pub decoder: StackVars<'t, F>,
    pub lm_head: Var<'t, F>,
}

impl<'t, F: Real> BoundParameters<'t, F> for HatVars<'t, F> {
    fn vars(&self) -> Vec<Var<'t, F>> {
        let mut out = vec![self.char_embed];
        out.extend(self.encoder.vars());
        out.push(self.w_e);
        out.extend(self.backbone.vars());
        out.push(self.w_d);
        out.extend(self.decoder.vars());
        out.push(self.lm_head);
        out
    }
}

/// Logit rows predicting one word: row `start + j` predicts byte `j` of
/// word `word` of document `doc`; the last row predicts the word's
/// terminator (`[W]`, or `[S]` for the end-of-document block).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpan {
    pub doc: usize,
    pub word: usize,
    pub start: usize,
    pub len: usize,
}

pub struct HatForward<'t, F: Real> {
    pub logits: Var<'t, F>,
    pub targets: Vec<usize>,
    pub blocks: Vec<BlockSpan>,
    /// Total source bytes of the documents.
    pub n_bytes: usize,
}

fn encoder_input(word: &Word) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(WORD_MARKER as usize).chain(word.bytes().iter().map(|&b| b as usize))
}

impl<'t, F: Real> HatVars<'t, F> {
    /// Rebuilds the handles from a slice in [`BoundParameters::vars`] order.
    pub fn from_vars(cfg: &HatConfig, vars: &[Var<'t, F>]) -> Self {
        let (encoder, rest) = StackVars::from_vars(&vars[1..], cfg.encoder.layers);
        let w_e = rest[0];
        let (backbone, rest) = StackVars::from_vars(&rest[1..], cfg.backbone.layers);
        let w_d = rest[0];
        let (decoder, rest) = StackVars::from_vars(&rest[1..], cfg.decoder.layers);
        HatVars {
            char_embed: vars[0],
            encoder,
            w_e,
            backbone,
            w_d,
            decoder,
            lm_head: rest[0],
        }
    }

    fn tape(&self) -> &'t Tape<F> {
        self.char_embed.tape()
    }

    fn check_word(cfg: &HatConfig, w: &Word) -> Result<(), ModelError> {
        if !w.is_end_of_doc() && w.len() > cfg.splitter.max_word_len {
            return Err(ModelError::WordTooLong {
                len: w.len(),
                cap: cfg.splitter.max_word_len,
            });
        }
        Ok(())
    }

    /// Rows `C([W]), C(b_1), …, C(b_ℓ)`.
    pub fn embed_word_chars(&self, word: &Word) -> Result<Var<'t, F>, ModelError> {
        let ids: Vec<usize> = encoder_input(word).collect();
        Ok(self.char_embed.gather_rows(&ids)?)
    }

    /// Word embeddings `e^i`, one row per word. Words are encoded together
    /// under a block-diagonal mask, so each row depends on its own word only.
    pub fn encode_words(&self, cfg: &HatConfig, words: &[&Word]) -> Result<Var<'t, F>, ModelError> {
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(words.len());
        let mut slots = Vec::with_capacity(words.len());
        for w in words {
            Self::check_word(cfg, w)?;
            slots.push(ids.len());
            ids.extend(encoder_input(w));
            segments.push(w.len() + 1);
        }
        let x = self.char_embed.gather_rows(&ids)?;
        let mask = AttentionMask::segmented(MaskMode::Bidirectional, segments);
        let h = stack_forward(&cfg.encoder, &self.encoder, x, &mask, None)?;
        Ok(h.gather_rows(&slots)?)
    }

    pub fn encode_word(&self, cfg: &HatConfig, word: &Word) -> Result<Var<'t, F>, ModelError> {
        self.encode_words(cfg, &[word])
    }

    /// Predictive embeddings `p^i = W_D · B(W_E · e)^i`.
    pub fn backbone_forward(
        &self,
        cfg: &HatConfig,
        word_embs: Var<'t, F>,
        mask: &AttentionMask,
        cache: Option<&mut KvCache<F>>,
    ) -> Result<Var<'t, F>, ModelError> {
        let e = word_embs.linear(self.w_e)?;
        let h = stack_forward(&cfg.backbone, &self.backbone, e, mask, cache)?;
        Ok(h.linear(self.w_d)?)
    }

    /// Decoder logits for one block with input `[p, C(fed_1), …]`.
    pub fn decode_block(&self, cfg: &HatConfig, p: Var<'t, F>, fed: &[u8]) -> Result<Var<'t, F>, ModelError> {
        let x = if fed.is_empty() {
            p
        } else {
            let ids: Vec<usize> = fed.iter().map(|&b| b as usize).collect();
            let chars = self.char_embed.gather_rows(&ids)?;
            self.tape().concat_rows(&[p, chars])?
        };
        let mask = AttentionMask::single(MaskMode::Causal, fed.len() + 1);
        let h = stack_forward(&cfg.decoder, &self.decoder, x, &mask, None)?;
        Ok(h.linear(self.lm_head)?)
    }

    /// Logits `l^i` for the word following `p^i`: `ℓ + 1` rows for a real
    /// word, one row for `[S]`.
    pub fn decode_word_logits(&self, cfg: &HatConfig, p: Var<'t, F>, next: &Word) -> Result<Var<'t, F>, ModelError> {
        let fed: &[u8] = if next.is_end_of_doc() { &[] } else { next.bytes() };
        self.decode_block(cfg, p, fed)
    }

    /// Full teacher-forced pass over a batch of documents, each ending in
    /// `[S]`. Documents are isolated from each other by the masks.
    pub fn forward_batch(&self, cfg: &HatConfig, docs: &[SplitDocument]) -> Result<HatForward<'t, F>, ModelError> {
        let mut words: Vec<&Word> = Vec::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (di, doc) in docs.iter().enumerate() {
            if !doc.has_end_of_doc() {
                return Err(ModelError::MissingEndOfDoc(di));
            }
            words.extend(doc.words.iter());
            doc_lens.push(doc.len());
        }
        let e = self.encode_words(cfg, &words)?;
        let mask = AttentionMask::segmented(MaskMode::Causal, doc_lens);
        let p = self.backbone_forward(cfg, e, &mask, None)?;

        let n_words = words.len();
        let mut fed = Vec::new();
        let mut order = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::new();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (di, doc) in docs.iter().enumerate() {
            for (wi, next) in doc.words.iter().enumerate().skip(1) {
                let start = order.len();
                order.push(offset + wi - 1);
                if next.is_end_of_doc() {
                    targets.push(END_OF_DOC as usize);
                } else {
                    for &b in next.bytes() {
                        order.push(n_words + fed.len());
                        fed.push(b as usize);
                        targets.push(b as usize);
                    }
                    targets.push(WORD_MARKER as usize);
                }
                let len = order.len() - start;
                segments.push(len);
                blocks.push(BlockSpan {
                    doc: di,
                    word: wi,
                    start,
                    len,
                });
            }
            offset += doc.len();
        }
        if blocks.is_empty() {
            return Err(ModelError::NoTargets);
        }
        let pool = if fed.is_empty() {
            p
        } else {
            let chars = self.char_embed.gather_rows(&fed)?;
            self.tape().concat_rows(&[p, chars])?
        };
        let x = pool.gather_rows(&order)?;
        let mask = AttentionMask::segmented(MaskMode::Causal, segments);
        let h = stack_forward(&cfg.decoder, &self.decoder, x, &mask, None)?;
        let logits = h.linear(self.lm_head)?;
        Ok(HatForward {
            logits,
            targets,
            blocks,
            n_bytes: docs.iter().map(|d| d.source_len).sum(),
        })
    }

    pub fn forward_document(&self, cfg: &HatConfig, doc: &SplitDocument) -> Result<HatForward<'t, F>, ModelError> {
        self.forward_batch(cfg, std::slice::from_ref(doc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::SplitRule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> HatConfig {
        HatConfig::new(8, 16, (1, 1, 1), 4, SplitterConfig::default())
    }

    fn params(cfg: &HatConfig, seed: u64) -> HatParams<f64> {
        HatParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn doc(cfg: &HatConfig, text: &str) -> SplitDocument {
        cfg.splitter.split_document(text.as_bytes()).unwrap()
    }

    #[test]
    fn config_validation() {
        let cfg = tiny();
        cfg.validate().unwrap();
        let mut bad = cfg;
        bad.backbone.mask = MaskMode::Bidirectional;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.word_dim = 32;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_matches_tensors() {
        let cfg = tiny();
        let p = params(&cfg, 0);
        assert_eq!(p.param_count() as u64, cfg.param_count());
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "char_embed");
        assert_eq!(names.last().unwrap(), "lm_head");
        let tape = Tape::new();
        assert_eq!(p.bind(&tape, true).vars().len(), names.len());
    }

    #[test]
    fn char_embedding_rows() {
        let cfg = tiny();
        let p = params(&cfg, 1);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let e = v.embed_word_chars(&Word::new(b"ab".to_vec())).unwrap().value();
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e.row(0), p.char_embed.row(0xFF));
        assert_eq!(e.row(1), p.char_embed.row(b'a' as usize));
        assert_eq!(e.row(2), p.char_embed.row(b'b' as usize));
        let s = v.embed_word_chars(&Word::end_of_doc()).unwrap().value();
        assert_eq!(s.shape(), &[2, 8]);
    }

    #[test]
    fn word_encoding_is_local_and_order_sensitive() {
        let cfg = tiny();
        let p = params(&cfg, 2);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let w = Word::new(b"word ".to_vec());
        let alone = v.encode_word(&cfg, &w).unwrap().value();
        assert_eq!(alone.shape(), &[1, 8]);
        let other = Word::new(b"xyz".to_vec());
        let batch = v.encode_words(&cfg, &[&other, &w, &other]).unwrap().value();
        assert_eq!(batch.row(1), alone.row(0));
        let permuted = v.encode_word(&cfg, &Word::new(b"wrod ".to_vec())).unwrap().value();
        assert_ne!(permuted.row(0), alone.row(0));
    }

    #[test]
    fn projections_do_not_round_trip() {
        let cfg = tiny();
        let p = params(&cfg, 3);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn(&[1, 8], |i| i as f64 - 3.5));
        let back = x.linear(v.w_e).unwrap().linear(v.w_d).unwrap().value();
        assert!(back.max_abs_diff(&x.value()) > 1e-3);
    }

    #[test]
    fn decoder_block_shapes() {
        let cfg = tiny();
        let p = params(&cfg, 4);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let pi = tape.constant(Tensor::zeros(&[1, 8]));
        let l = v.decode_word_logits(&cfg, pi, &Word::new(b"ab".to_vec())).unwrap();
        assert_eq!(l.shape(), vec![3, 256]);
        let l = v.decode_word_logits(&cfg, pi, &Word::end_of_doc()).unwrap();
        assert_eq!(l.shape(), vec![1, 256]);
    }

    #[test]
    fn blocks_and_targets() {
        let cfg = tiny();
        let p = params(&cfg, 5);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let d = doc(&cfg, "hi yo");
        assert_eq!(d.len(), 3);
        let f = v.forward_document(&cfg, &d).unwrap();
        // one block per word after the first: "yo" then [S]
        assert_eq!(f.blocks.len(), d.len() - 1);
        assert_eq!(f.targets, vec![b'y' as usize, b'o' as usize, 0xFF, 0xFE]);
        assert_eq!(f.logits.shape(), vec![4, 256]);
        assert_eq!(f.n_bytes, 5);
        let single = doc(&cfg, "hi");
        let f = v.forward_document(&cfg, &single).unwrap();
        assert_eq!(f.targets, vec![0xFE]);
        assert!(matches!(v.forward_document(&cfg, &doc(&cfg, "")), Err(ModelError::NoTargets)));
    }

    #[test]
    fn batch_equals_separate_documents() {
        let cfg = tiny();
        let p = params(&cfg, 6);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let a = doc(&cfg, "one two three");
        let b = doc(&cfg, "four five");
        let both = v.forward_batch(&cfg, &[a.clone(), b.clone()]).unwrap();
        let fa = v.forward_document(&cfg, &a).unwrap();
        let fb = v.forward_document(&cfg, &b).unwrap();
        let mut rows = fa.logits.value().data().to_vec();
        rows.extend_from_slice(fb.logits.value().data());
        assert_eq!(both.logits.value().data(), &rows[..]);
    }

    #[test]
    fn fixed_split_documents_work() {
        let cfg = HatConfig::new(8, 16, (1, 1, 1), 4, SplitterConfig::new(SplitRule::FixedSize(8), 64).unwrap());
        let p = params(&cfg, 7);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let d = doc(&cfg, "abcdefghijklmnopqrs");
        let f = v.forward_document(&cfg, &d).unwrap();
        assert_eq!(f.targets.len(), (19 - 8) + (d.len() - 2) + 1);
    }

    #[test]
    fn rejects_overlong_words() {
        let mut cfg = tiny();
        cfg.splitter.max_word_len = 4;
        let p = params(&cfg, 8);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let r = v.encode_word(&cfg, &Word::new(b"abcdef".to_vec()));
        assert!(matches!(r, Err(ModelError::WordTooLong { len: 6, cap: 4 })));
    }
}
