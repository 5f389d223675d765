//! Pre-norm transformer stacks (RMSNorm, rotary attention, SwiGLU MLP, no
//! biases) with segment-aware masks and an optional key/value cache.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{init, NumericsError, Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid stack config: {0}")]
    InvalidConfig(String),
    #[error("kv cache inconsistent: {0}")]
    CacheInconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mask: MaskMode,
    pub eps: f64,
}

/// SwiGLU hidden width: 8/3 of `hidden`, rounded to the nearest multiple of 8.
pub fn swiglu_hidden(hidden: usize) -> usize {
    let ideal = 8.0 * hidden as f64 / 3.0;
    (((ideal / 8.0).round() as usize) * 8).max(8)
}

impl StackConfig {
    pub fn new(hidden: usize, layers: usize, heads: usize, mask: MaskMode) -> Self {
        StackConfig {
            hidden,
            layers,
            heads,
            mask,
            eps: NORM_EPS,
        }
    }

    /// Config with `heads = hidden / head_size`.
    pub fn with_head_size(hidden: usize, layers: usize, head_size: usize, mask: MaskMode) -> Self {
        Self::new(hidden, layers, hidden / head_size.max(1), mask)
    }

    pub fn head_size(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn ffn_hidden(&self) -> usize {
        swiglu_hidden(self.hidden)
    }

    pub fn validate(&self) -> Result<(), StackError> {
        let bad = |m: String| Err(StackError::InvalidConfig(m));
        if self.layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not a multiple of heads {}", self.hidden, self.heads));
        }
        if !self.head_size().is_multiple_of(2) {
            return bad(format!("head size {} must be even for rotary embedding", self.head_size()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("norm epsilon must be positive".into());
        }
        Ok(())
    }

    /// Exact parameter count: attention, SwiGLU with the rounded width, and
    /// all norm gains.
    pub fn param_count(&self) -> u64 {
        let d = self.hidden as u64;
        let f = self.ffn_hidden() as u64;
        let per_layer = 4 * d * d + 3 * d * f + 2 * d;
        self.layers as u64 * per_layer + d
    }

    /// `12·L·D²`, the count used by the cost model.
    pub fn param_count_ideal(&self) -> u64 {
        12 * self.layers as u64 * (self.hidden as u64).pow(2)
    }
}

/// Mask over a sequence made of consecutive segments. Positions never attend
/// across segments; rotary positions restart at every segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub mode: MaskMode,
    pub segments: Vec<usize>,
}

impl AttentionMask {
    pub fn single(mode: MaskMode, len: usize) -> Self {
        AttentionMask {
            mode,
            segments: vec![len],
        }
    }

    pub fn segmented(mode: MaskMode, segments: Vec<usize>) -> Self {
        AttentionMask { mode, segments }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Allowed key range for each query. `past` cached positions precede the
    /// first segment and belong to it.
    pub fn ranges(&self, past: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        let mut start = 0;
        for (s, &len) in self.segments.iter().enumerate() {
            let lo = if s == 0 { 0 } else { start + past };
            let end = start + past + len;
            for i in 0..len {
                let hi = match self.mode {
                    MaskMode::Causal => start + past + i + 1,
                    MaskMode::Bidirectional => end,
                };
                out.push((lo, hi));
            }
            start += len;
        }
        out
    }

    pub fn positions(&self, past: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (s, &len) in self.segments.iter().enumerate() {
            let offset = if s == 0 { past } else { 0 };
            out.extend((0..len).map(|i| offset + i));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F: Real> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub mlp_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackParams<F: Real> {
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Tensor<F>,
}

impl<F: Real> StackParams<F> {
    pub fn init<R: Rng>(cfg: &StackConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let f = cfg.ffn_hidden();
        let out_std = init::INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                attn_norm: init::ones(&[d]),
                wq: init::normal(&[d, d], init::INIT_STD, rng),
                wk: init::normal(&[d, d], init::INIT_STD, rng),
                wv: init::normal(&[d, d], init::INIT_STD, rng),
                wo: init::normal(&[d, d], out_std, rng),
                mlp_norm: init::ones(&[d]),
                w_gate: init::normal(&[f, d], init::INIT_STD, rng),
                w_up: init::normal(&[f, d], init::INIT_STD, rng),
                w_down: init::normal(&[d, f], out_std, rng),
            })
            .collect();
        StackParams {
            layers,
            final_norm: init::ones(&[d]),
        }
    }

    /// Tensors in canonical order with their names.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("{prefix}.layer{i}.{n}"), t));
            }
        }
        out.push((format!("{prefix}.final_norm"), &self.final_norm));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> StackVars<'t, F> {
        let leaf = |t: &Tensor<F>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        StackVars {
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm: leaf(&l.attn_norm),
                    wq: leaf(&l.wq),
                    wk: leaf(&l.wk),
                    wv: leaf(&l.wv),
                    wo: leaf(&l.wo),
                    mlp_norm: leaf(&l.mlp_norm),
                    w_gate: leaf(&l.w_gate),
                    w_up: leaf(&l.w_up),
                    w_down: leaf(&l.w_down),
                })
                .collect(),
            final_norm: leaf(&self.final_norm),
        }
    }
}

#[derive(Clone)]
pub struct LayerVars<'t, F: Real> {
    pub attn_norm: Var<'t, F>,
    pub wq: Var<'t, F>,
    pub wk: Var<'t, F>,
    pub wv: Var<'t, F>,
    pub wo: Var<'t, F>,
    pub mlp_norm: Var<'t, F>,
    pub w_gate: Var<'t, F>,
    pub w_up: Var<'t, F>,
    pub w_down: Var<'t, F>,
}

#[derive(Clone)]
pub struct StackVars<'t, F: Real> {
    pub layers: Vec<LayerVars<'t, F>>,
    pub final_norm: Var<'t, F>,
}

impl<'t, F: Real> StackVars<'t, F> {
    /// Rebuilds a stack of `layers` layers from the front of `vars` (in
    /// [`StackVars::vars`] order) and returns the remaining handles.
    pub fn from_vars<'v>(vars: &'v [Var<'t, F>], layers: usize) -> (Self, &'v [Var<'t, F>]) {
        let n = layers * 9;
        let stack = StackVars {
            layers: vars[..n]
                .chunks(9)
                .map(|c| LayerVars {
                    attn_norm: c[0],
                    wq: c[1],
                    wk: c[2],
                    wv: c[3],
                    wo: c[4],
                    mlp_norm: c[5],
                    w_gate: c[6],
                    w_up: c[7],
                    w_down: c[8],
                })
                .collect(),
            final_norm: vars[n],
        };
        (stack, &vars[n + 1..])
    }

    /// Same order as [`StackParams::named`].
    pub fn vars(&self) -> Vec<Var<'t, F>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out.push(self.final_norm);
        out
    }
}

/// Rotated keys and values of every past position, per layer.
#[derive(Clone, Debug)]
pub struct KvCache<F: Real> {
    hidden: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(cfg: &StackConfig) -> Self {
        KvCache {
            hidden: cfg.hidden,
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position from `len` on.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
                layer.truncate(len * self.hidden);
            }
            self.len = len;
        }
    }

    fn check(&self, cfg: &StackConfig, mask: &AttentionMask) -> Result<(), StackError> {
        let bad = |m: String| Err(StackError::CacheInconsistent(m));
        if cfg.mask != MaskMode::Causal || mask.mode != MaskMode::Causal {
            return bad("cache requires a causal stack".into());
        }
        if mask.segments.len() != 1 {
            return bad("cached input must be a single segment".into());
        }
        if self.hidden != cfg.hidden || self.keys.len() != cfg.layers {
            return bad(format!(
                "cache built for hidden {} × {} layers, stack has {} × {}",
                self.hidden,
                self.keys.len(),
                cfg.hidden,
                cfg.layers
            ));
        }
        if self.keys.iter().chain(&self.values).any(|k| k.len() != self.len * self.hidden) {
            return bad("cache layers disagree in length".into());
        }
        Ok(())
    }
}

/// Runs the stack over `x` (`S × hidden`). When a cache is given, `x` holds
/// the positions following the cached ones and the cache is extended.
pub fn stack_forward<'t, F: Real>(
    cfg: &StackConfig,
    params: &StackVars<'t, F>,
    x: Var<'t, F>,
    mask: &AttentionMask,
    mut cache: Option<&mut KvCache<F>>,
) -> Result<Var<'t, F>, StackError> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.hidden || shape[0] != mask.len() || params.layers.len() != cfg.layers {
        return Err(NumericsError::ShapeMismatch {
            op: "stack_forward",
            lhs: shape,
            rhs: vec![mask.len(), cfg.hidden],
        }
        .into());
    }
    if mask.mode != cfg.mask {
        return Err(StackError::InvalidConfig("mask mode differs from stack mode".into()));
    }
    let past = match &cache {
        Some(c) => {
            c.check(cfg, mask)?;
            c.len
        }
        None => 0,
    };
    let tape = x.tape();
    let ranges = mask.ranges(past);
    let positions = mask.positions(past);
    let eps = F::from_f64(cfg.eps);
    let mut h = x;
    for (li, layer) in params.layers.iter().enumerate() {
        let a = h.rmsnorm(layer.attn_norm, eps)?;
        let q = a.linear(layer.wq)?.rope(&positions, cfg.heads)?;
        let mut k = a.linear(layer.wk)?.rope(&positions, cfg.heads)?;
        let mut v = a.linear(layer.wv)?;
        if let Some(c) = cache.as_deref_mut() {
            let new_k = k.value();
            let new_v = v.value();
            if past > 0 {
                let old_k = tape.constant(Tensor::new(vec![past, cfg.hidden], c.keys[li].clone())?);
                let old_v = tape.constant(Tensor::new(vec![past, cfg.hidden], c.values[li].clone())?);
                k = tape.concat_rows(&[old_k, k])?;
                v = tape.concat_rows(&[old_v, v])?;
            }
            c.keys[li].extend_from_slice(new_k.data());
            c.values[li].extend_from_slice(new_v.data());
        }
        let att = q.attention(k, v, cfg.heads, &ranges)?.linear(layer.wo)?;
        h = h.add(att)?;
        let m = h.rmsnorm(layer.mlp_norm, eps)?;
        let gate = m.linear(layer.w_gate)?.silu()?;
        let up = m.linear(layer.w_up)?;
        h = h.add(gate.mul(up)?.linear(layer.w_down)?)?;
    }
    if let Some(c) = cache {
        c.len += mask.len();
    }
    Ok(h.rmsnorm(params.final_norm, eps)?)
}
