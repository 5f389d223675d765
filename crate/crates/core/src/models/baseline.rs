use rand::Rng;

use super::hat::cast_stack;
use super::{BoundParameters, ModelError, Parameters};
use crate::bpe::TokenSeq;
use crate::numerics::{init, NumericsError, Real, Tape, Tensor, Var};
use crate::transformer::{stack_forward, AttentionMask, MaskMode, StackConfig, StackParams, StackVars};

/// Token-level causal transformer over BPE ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub vocab: usize,
    pub stack: StackConfig,
}

impl BaselineConfig {
    pub fn new(vocab: usize, hidden: usize, layers: usize, head_size: usize) -> Self {
        BaselineConfig {
            vocab,
            stack: StackConfig::with_head_size(hidden, layers, head_size, MaskMode::Causal),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab == 0 {
            return Err(ModelError::InvalidConfig("vocabulary must not be empty".into()));
        }
        if self.stack.mask != MaskMode::Causal {
            return Err(ModelError::InvalidConfig("baseline stack must be causal".into()));
        }
        Ok(self.stack.validate()?)
    }

    pub fn param_count(&self) -> u64 {
        2 * (self.vocab * self.stack.hidden) as u64 + self.stack.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams<F: Real> {
    pub embed: Tensor<F>,
    pub stack: StackParams<F>,
    /// Output head stored as `V_T × D`.
    pub lm_head: Tensor<F>,
}

impl<F: Real> BaselineParams<F> {
    pub fn init<R: Rng>(cfg: &BaselineConfig, rng: &mut R) -> Self {
        let d = cfg.stack.hidden;
        BaselineParams {
            embed: init::normal(&[cfg.vocab, d], init::INIT_STD, rng),
            stack: StackParams::init(&cfg.stack, rng),
            lm_head: init::normal(&[cfg.vocab, d], init::INIT_STD, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> BaselineVars<'t, F> {
        let leaf = |t: &Tensor<F>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BaselineVars {
            embed: leaf(&self.embed),
            stack: self.stack.bind(tape, trainable),
            lm_head: leaf(&self.lm_head),
        }
    }

    pub fn cast<G: Real>(&self) -> BaselineParams<G> {
        BaselineParams {
            embed: self.embed.cast(),
            stack: cast_stack(&self.stack),
            lm_head: self.lm_head.cast(),
        }
    }
}

impl<F: Real> Parameters<F> for BaselineParams<F> {
    fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        out.extend(self.stack.named("stack"));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embed];
        out.extend(self.stack.tensors_mut());
        out.push(&mut self.lm_head);
        out
    }
}

#[derive(Clone)]
pub struct BaselineVars<'t, F: Real> {
    pub embed: Var<'t, F>,
    pub stack: StackVars<'t, F>,
    pub lm_head: Var<'t, F>,
}

impl<'t, F: Real> BoundParameters<'t, F> for BaselineVars<'t, F> {
    fn vars(&self) -> Vec<Var<'t, F>> {
        let mut out = vec![self.embed];
        out.extend(self.stack.vars());
        out.push(self.lm_head);
        out
    }
}

pub struct BaselineForward<'t, F: Real> {
    pub logits: Var<'t, F>,
    pub targets: Vec<usize>,
    /// `(start, len)` of each document's rows in `logits`.
    pub spans: Vec<(usize, usize)>,
}

impl<'t, F: Real> BaselineVars<'t, F> {
    /// Rebuilds the handles from a slice in [`BoundParameters::vars`] order.
    pub fn from_vars(cfg: &BaselineConfig, vars: &[Var<'t, F>]) -> Self {
        let (stack, rest) = StackVars::from_vars(&vars[1..], cfg.stack.layers);
        BaselineVars {
            embed: vars[0],
            stack,
            lm_head: rest[0],
        }
    }

    fn hidden(&self, cfg: &BaselineConfig, docs: &[&TokenSeq]) -> Result<Var<'t, F>, ModelError> {
        let mut ids = Vec::new();
        for d in docs {
            for &t in &d.ids {
                if t as usize >= cfg.vocab {
                    return Err(NumericsError::IndexOutOfRange {
                        index: t as usize,
                        bound: cfg.vocab,
                    }
                    .into());
                }
                ids.push(t as usize);
            }
        }
        let x = self.embed.gather_rows(&ids)?;
        let mask = AttentionMask::segmented(MaskMode::Causal, docs.iter().map(|d| d.len()).collect());
        Ok(stack_forward(&cfg.stack, &self.stack, x, &mask, None)?)
    }

    /// Logits at every position of one sequence, `S_T × V_T`.
    pub fn logits(&self, cfg: &BaselineConfig, tokens: &TokenSeq) -> Result<Var<'t, F>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::NoTargets);
        }
        Ok(self.hidden(cfg, &[tokens])?.linear(self.lm_head)?)
    }

    /// Next-token predictions for every token after the first of each
    /// document. Documents of fewer than two tokens contribute nothing.
    pub fn forward_batch(&self, cfg: &BaselineConfig, docs: &[TokenSeq]) -> Result<BaselineForward<'t, F>, ModelError> {
        let kept: Vec<&TokenSeq> = docs.iter().filter(|d| !d.is_empty()).collect();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut spans = Vec::with_capacity(docs.len());
        let mut offset = 0;
        for d in docs {
            let start = rows.len();
            for i in 1..d.len() {
                rows.push(offset + i - 1);
                targets.push(d.ids[i] as usize);
            }
            spans.push((start, rows.len() - start));
            offset += d.len();
        }
        if rows.is_empty() {
            return Err(ModelError::NoTargets);
        }
        let h = self.hidden(cfg, &kept)?.gather_rows(&rows)?;
        Ok(BaselineForward {
            logits: h.linear(self.lm_head)?,
            targets,
            spans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_check, spread, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BaselineConfig, BaselineParams<f64>) {
        let cfg = BaselineConfig::new(12, 8, 1, 4);
        cfg.validate().unwrap();
        let p = BaselineParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (cfg, p)
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            source_len: ids.len(),
        }
    }

    #[test]
    fn single_token_and_causality() {
        let (cfg, p) = setup();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        assert_eq!(v.logits(&cfg, &seq(&[3])).unwrap().shape(), vec![1, 12]);
        let a = v.logits(&cfg, &seq(&[1, 2, 3, 4])).unwrap().value();
        let b = v.logits(&cfg, &seq(&[1, 2, 9, 9])).unwrap().value();
        assert_eq!(&a.data()[..24], &b.data()[..24]);
        assert_ne!(&a.data()[24..], &b.data()[24..]);
        assert!(v.logits(&cfg, &seq(&[12])).is_err());
    }

    #[test]
    fn batch_targets() {
        let (cfg, p) = setup();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let f = v.forward_batch(&cfg, &[seq(&[1, 2, 3]), seq(&[5]), seq(&[7, 8])]).unwrap();
        assert_eq!(f.targets, vec![2, 3, 8]);
        assert_eq!(f.spans, vec![(0, 2), (2, 0), (2, 1)]);
        assert!(matches!(v.forward_batch(&cfg, &[seq(&[1])]), Err(ModelError::NoTargets)));
    }

    #[test]
    fn gradient_check() {
        let (cfg, p) = setup();
        let mut params: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        spread(&mut params, 0.3, 2);
        let report = finite_diff_check(
            |_, vars| {
                let bv = BaselineVars::from_vars(&cfg, vars);
                let f = bv.forward_batch(&cfg, &[seq(&[1, 5, 2, 7]), seq(&[3, 3])])?;
                Ok::<_, ModelError>(f.logits.cross_entropy(&f.targets)?)
            },
            &params,
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
