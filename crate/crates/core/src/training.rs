//! Losses, AdamW, the learning-rate schedule, byte-budget packing and the
//! training loop.

use std::f64::consts::PI;
use std::time::Instant;

use thiserror::Error;

use crate::bpe::{BpeVocab, TokenSeq};
use crate::exec;
use crate::models::{
    BaselineConfig, BaselineParams, BoundParameters, HatConfig, HatParams, ModelError, Parameters,
};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};
use crate::segmentation::{SegmentError, SplitDocument, SplitterConfig, MAX_DOC_BYTES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("document {doc} has a word of {word_len} bytes, larger than the budget of {budget}")]
    DocumentOversized { doc: usize, word_len: usize, budget: usize },
    #[error("optimizer state does not match the parameters: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("no trainable documents in the corpus")]
    EmptyCorpus,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(e.into())
    }
}

pub const LR_REFERENCE: f64 = 3e-4;
pub const LR_REFERENCE_HEADS: f64 = 32.0;

/// Peak learning rate `(32 / heads) · 3e-4`. For the hierarchical model the
/// backbone head count is used.
pub fn lr_for(heads: usize) -> f64 {
    LR_REFERENCE_HEADS / heads.max(1) as f64 * LR_REFERENCE
}

/// Summed and per-position cross-entropy of one forward pass.
pub struct Loss<'t, F: Real> {
    pub sum: Var<'t, F>,
    pub positions: usize,
}

impl<'t, F: Real> Loss<'t, F> {
    pub fn mean(&self) -> Result<Var<'t, F>, NumericsError> {
        self.sum.scale(F::one() / F::from_f64(self.positions as f64))
    }
}

/// Next-byte cross-entropy over every predicted position of `docs`.
pub fn hat_loss<'t, F: Real>(
    cfg: &HatConfig,
    vars: &crate::models::HatVars<'t, F>,
    docs: &[SplitDocument],
) -> Result<Loss<'t, F>, ModelError> {
    let f = vars.forward_batch(cfg, docs)?;
    Ok(Loss {
        sum: f.logits.cross_entropy(&f.targets)?,
        positions: f.targets.len(),
    })
}

pub fn baseline_loss<'t, F: Real>(
    cfg: &BaselineConfig,
    vars: &crate::models::BaselineVars<'t, F>,
    docs: &[TokenSeq],
) -> Result<Loss<'t, F>, ModelError> {
    let f = vars.forward_batch(cfg, docs)?;
    Ok(Loss {
        sum: f.logits.cross_entropy(&f.targets)?,
        positions: f.targets.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// AdamW moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new<P: Parameters<F>>(config: AdamWConfig, params: &P) -> Self {
        let zeros: Vec<Tensor<F>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected AdamW update with decoupled weight decay applied
    /// to every parameter.
    pub fn update(&mut self, params: Vec<&mut Tensor<F>>, grads: &[Tensor<F>], lr: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(TrainError::ShapeMismatch(format!("parameter {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (F::one() - b1) * gv;
                v[j] = b2 * v[j] + (F::one() - b2) * gv * gv;
                let m_hat = m[j].as_f64() / bc1;
                let v_hat = v[j].as_f64() / bc2;
                let x = pv.as_f64();
                *pv = F::from_f64(x - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * x));
            }
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to `floor_fraction · peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_fraction: f64,
    /// Learning rate at step 0 as a fraction of `peak`.
    pub start_fraction: f64,
}

pub const DEFAULT_WARMUP: usize = 500;
pub const DEFAULT_FLOOR: f64 = 0.1;

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: usize, total_steps: usize) -> Self {
        LrSchedule {
            peak,
            warmup_steps,
            total_steps,
            floor_fraction: DEFAULT_FLOOR,
            start_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidSchedule(m.into()));
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return bad("floor_fraction must be in (0, 1]");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if self.peak.is_nan() || self.peak <= 0.0 || !(0.0..=1.0).contains(&self.start_fraction) {
            return bad("peak must be positive and start_fraction in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.peak * (self.start_fraction + (1.0 - self.start_fraction) * t);
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        let f = self.floor_fraction;
        self.peak * (f + (1.0 - f) * (1.0 + (PI * t).cos()) / 2.0)
    }
}

/// A document cut at a word boundary to fit the length limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    pub doc: usize,
    pub original_len: usize,
    pub kept_len: usize,
}

/// Documents delivered together in one optimizer step. Every consumer sees
/// the same bytes; documents never attend to each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub docs: Vec<Vec<u8>>,
    /// Index of each document in the input corpus.
    pub doc_ids: Vec<usize>,
    pub byte_budget: usize,
    pub truncations: Vec<Truncation>,
}

impl PackedBatch {
    pub fn bytes(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

/// Longest prefix of `text` made of whole words that fits in `limit` bytes.
pub fn truncate_at_word(text: &[u8], limit: usize, splitter: &SplitterConfig) -> Result<usize, SegmentError> {
    if text.len() <= limit {
        return Ok(text.len());
    }
    let doc = splitter.split(text)?;
    let mut kept = 0;
    for w in &doc.words {
        if kept + w.len() > limit {
            break;
        }
        kept += w.len();
    }
    Ok(kept)
}

/// Greedily fills batches of at most `byte_budget` bytes. Documents longer
/// than the smaller of the budget and the document cap are cut at a word
/// boundary of `splitter`; empty documents are dropped.
pub fn pack_documents<T: AsRef<[u8]>>(
    docs: &[T],
    byte_budget: usize,
    splitter: &SplitterConfig,
) -> Result<Vec<PackedBatch>, TrainError> {
    let limit = byte_budget.min(MAX_DOC_BYTES);
    let mut batches = Vec::new();
    let mut cur = PackedBatch {
        docs: Vec::new(),
        doc_ids: Vec::new(),
        byte_budget,
        truncations: Vec::new(),
    };
    for (i, d) in docs.iter().enumerate() {
        let text = d.as_ref();
        if text.is_empty() {
            continue;
        }
        let kept = truncate_at_word(text, limit, splitter)?;
        if kept == 0 {
            let first = splitter.split(text)?.words.first().map_or(0, |w| w.len());
            return Err(TrainError::DocumentOversized {
                doc: i,
                word_len: first,
                budget: limit,
            });
        }
        if cur.bytes() + kept > byte_budget && !cur.docs.is_empty() {
            batches.push(std::mem::replace(
                &mut cur,
                PackedBatch {
                    docs: Vec::new(),
                    doc_ids: Vec::new(),
                    byte_budget,
                    truncations: Vec::new(),
                },
            ));
        }
        if kept < text.len() {
            cur.truncations.push(Truncation {
                doc: i,
                original_len: text.len(),
                kept_len: kept,
            });
        }
        cur.docs.push(text[..kept].to_vec());
        cur.doc_ids.push(i);
    }
    if !cur.docs.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub bytes: usize,
    pub words: usize,
    pub tokens: usize,
    pub wall_ms: u128,
}

impl StepLog {
    pub const HEADER: &'static str = "step\tlr\tloss\tbytes\twords\ttokens\twall_ms";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.loss, self.bytes, self.words, self.tokens, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub byte_budget: usize,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Gradient sums of one document.
struct DocGrad<F> {
    loss: f64,
    positions: usize,
    grads: Vec<Tensor<F>>,
}

fn doc_grad<'t, F, V>(tape: &'t Tape<F>, vars: &V, loss: Loss<'t, F>) -> Result<DocGrad<F>, ModelError>
where
    F: Real,
    V: BoundParameters<'t, F>,
{
    let g = tape.backward(loss.sum)?;
    Ok(DocGrad {
        loss: loss.sum.value().item()?.as_f64(),
        positions: loss.positions,
        grads: vars.vars().into_iter().map(|v| g.wrt(v)).collect(),
    })
}

/// Per-step counts supplied by the caller: `(bytes, words, tokens)`.
type Counts = (usize, usize, usize);

#[allow(clippy::too_many_arguments)]
fn train_loop<F, P, D, G, C>(
    params: &mut P,
    state: &mut OptimizerState<F>,
    batches: &[Vec<D>],
    opts: &TrainOptions,
    start_step: usize,
    grad: G,
    counts: C,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary, TrainError>
where
    F: Real,
    P: Parameters<F> + Sync,
    D: Sync,
    G: Fn(&P, &D) -> Result<Option<DocGrad<F>>, ModelError> + Sync,
    C: Fn(&[D]) -> Counts,
{
    opts.schedule.validate()?;
    if batches.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut losses = Vec::new();
    for step in start_step..opts.steps {
        let t0 = Instant::now();
        let batch = &batches[step % batches.len()];
        let per_doc = exec::map(batch, |d| grad(params, d));
        let mut total: Option<Vec<Tensor<F>>> = None;
        let mut loss = 0.0;
        let mut positions = 0;
        for r in per_doc {
            let Some(dg) = r.map_err(|e| match e {
                ModelError::Stack(crate::transformer::StackError::Numerics(NumericsError::NonFinite(op))) => {
                    TrainError::Diverged {
                        step,
                        reason: format!("non-finite value in {op}"),
                    }
                }
                other => other.into(),
            })?
            else {
                continue;
            };
            loss += dg.loss;
            positions += dg.positions;
            match &mut total {
                None => total = Some(dg.grads),
                Some(t) => {
                    for (a, b) in t.iter_mut().zip(&dg.grads) {
                        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let Some(mut grads) = total else {
            return Err(TrainError::EmptyCorpus);
        };
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: format!("loss {loss}"),
            });
        }
        let inv = F::from_f64(1.0 / positions as f64);
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        let lr = opts.schedule.lr_at(step + 1);
        state.update(params.tensors_mut(), &grads, lr)?;
        if params.named().iter().any(|(_, t)| !t.is_finite()) {
            return Err(TrainError::Diverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
        let mean = loss / positions as f64;
        losses.push(mean);
        let (bytes, words, tokens) = counts(batch);
        log(&StepLog {
            step: step + 1,
            lr,
            loss: mean,
            bytes,
            words,
            tokens,
            wall_ms: t0.elapsed().as_millis(),
        });
    }
    Ok(TrainSummary {
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
    })
}

/// Trains the hierarchical model. Each document of a batch runs on its own
/// tape; gradients are summed in document order and divided by the number of
/// predicted positions.
pub fn train_hat<F: Real>(
    cfg: &HatConfig,
    params: &mut HatParams<F>,
    state: &mut OptimizerState<F>,
    corpus: &[Vec<u8>],
    opts: &TrainOptions,
    start_step: usize,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let packed = pack_documents(corpus, opts.byte_budget, &cfg.splitter)?;
    let mut batches = Vec::with_capacity(packed.len());
    for b in &packed {
        let docs = b
            .docs
            .iter()
            .map(|d| cfg.splitter.split_document(d))
            .collect::<Result<Vec<_>, _>>()?;
        batches.push(docs);
    }
    train_loop(
        params,
        state,
        &batches,
        opts,
        start_step,
        |p: &HatParams<F>, doc: &SplitDocument| {
            if doc.len() < 2 {
                return Ok(None);
            }
            let tape = Tape::new();
            let vars = p.bind(&tape, true);
            let loss = hat_loss(cfg, &vars, std::slice::from_ref(doc))?;
            doc_grad(&tape, &vars, loss).map(Some)
        },
        |docs| {
            let bytes = docs.iter().map(|d| d.source_len).sum();
            let words = docs.iter().map(|d| d.num_real_words()).sum();
            (bytes, words, 0)
        },
        log,
    )
}

/// Trains the token-level baseline on the same packed bytes.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline<F: Real>(
    cfg: &BaselineConfig,
    vocab: &BpeVocab,
    splitter: &SplitterConfig,
    params: &mut BaselineParams<F>,
    state: &mut OptimizerState<F>,
    corpus: &[Vec<u8>],
    opts: &TrainOptions,
    start_step: usize,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let packed = pack_documents(corpus, opts.byte_budget, splitter)?;
    let batches: Vec<Vec<TokenSeq>> = packed
        .iter()
        .map(|b| b.docs.iter().map(|d| vocab.encode(d)).collect())
        .collect();
    train_loop(
        params,
        state,
        &batches,
        opts,
        start_step,
        |p: &BaselineParams<F>, doc: &TokenSeq| {
            if doc.len() < 2 {
                return Ok(None);
            }
            let tape = Tape::new();
            let vars = p.bind(&tape, true);
            let loss = baseline_loss(cfg, &vars, std::slice::from_ref(doc))?;
            doc_grad(&tape, &vars, loss).map(Some)
        },
        |docs| {
            let bytes = docs.iter().map(|d| d.source_len).sum();
            (bytes, 0, docs.iter().map(TokenSeq::len).sum())
        },
        log,
    )
}
