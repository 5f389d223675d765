//! Computation record and reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s. Values are kept
//! behind `Rc` so reading them never copies. [`Tape::backward`] walks the
//! record in reverse and returns the gradient of a scalar with respect to
//! every recorded node.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, matmul_nn, matmul_nt, matmul_tn};
use super::{NumericsError, Real, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    Linear(usize, usize),
    Silu(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<F>,
    },
    Rope {
        x: usize,
        positions: Vec<usize>,
        heads: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        ranges: Vec<(usize, usize)>,
        probs: Vec<Vec<F>>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(usize),
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<Var<'_, F>, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    fn leaf_rc(&self, value: Rc<Tensor<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    /// Constant leaf sharing storage with `value`; nothing is copied.
    pub fn constant_shared(&self, value: Rc<Tensor<F>>) -> Var<'_, F> {
        self.leaf_rc(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&self, parts: &[Var<'_, F>]) -> Result<Var<'_, F>, NumericsError> {
        let first = parts.first().ok_or(NumericsError::ShapeMismatch {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let cols = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut req = false;
        for p in parts {
            let v = p.value();
            if v.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
            req |= self.requires(p.id);
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids), req, "concat_rows")
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>, NumericsError> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), F::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, delta: Vec<F>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(delta) {
                            *a += b;
                        }
                    }
                    slot @ None => {
                        let shape = nodes[target].value.shape().to_vec();
                        *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
                    }
                }
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, gd.to_vec());
                    send(*b, gd.to_vec());
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    send(*a, gd.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    send(*b, gd.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
                Op::Scale(a, s) => send(*a, gd.iter().map(|&g| g * *s).collect()),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if nodes[*a].requires_grad {
                        send(*a, matmul_nt(gd, bv.data(), m, n, k));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, matmul_tn(av.data(), gd, m, k, n));
                    }
                }
                Op::Linear(x, w) => {
                    // y[m×n] = x[m×k] · w[n×k]ᵀ
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
                    if nodes[*x].requires_grad {
                        send(*x, matmul_nn(gd, wv.data(), m, n, k));
                    }
                    if nodes[*w].requires_grad {
                        send(*w, matmul_tn(gd, xv.data(), m, n, k));
                    }
                }
                Op::Silu(x) => {
                    let xv = nodes[*x].value.data();
                    send(
                        *x,
                        gd.iter()
                            .zip(xv)
                            .map(|(&g, &x)| {
                                let s = sigmoid(x);
                                g * s * (F::one() + x * (F::one() - s))
                            })
                            .collect(),
                    );
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = &nodes[*x].value;
                    let gv = nodes[*gain].value.data();
                    let cols = xv.cols();
                    let n = F::from_f64(cols as f64);
                    let mut dx = vec![F::zero(); xv.len()];
                    let mut dg = vec![F::zero(); cols];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let mut dot = F::zero();
                        for c in 0..cols {
                            dot += gr[c] * gv[c] * xr[c];
                            dg[c] += gr[c] * xr[c] * inv;
                        }
                        let coef = dot * inv * inv * inv / n;
                        for c in 0..cols {
                            dx[r * cols + c] = gr[c] * gv[c] * inv - xr[c] * coef;
                        }
                    }
                    send(*x, dx);
                    send(*gain, dg);
                }
                Op::Rope { x, positions, heads } => {
                    let cols = nodes[*x].value.cols();
                    send(*x, kernels::rope(gd, cols, positions, *heads, ROPE_BASE, true));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    ranges,
                    probs,
                } => {
                    let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                    let back = kernels::attention_backward(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        probs,
                        gd,
                        qv.cols(),
                        *heads,
                        ranges,
                        kv.rows(),
                    );
                    send(*q, back.dq);
                    send(*k, back.dk);
                    send(*v, back.dv);
                }
                Op::GatherRows { table, ids } => {
                    let tv = &nodes[*table].value;
                    let cols = tv.cols();
                    let mut dt = vec![F::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[id * cols + c] += gd[r * cols + c];
                        }
                    }
                    send(*table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        send(p, gd[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![F::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    send(*x, dx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let cols = nodes[*logits].value.cols();
                    let g0 = gd[0];
                    let mut dl: Vec<F> = probs.iter().map(|&p| p * g0).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * cols + t] -= g0;
                    }
                    send(*logits, dl);
                }
                Op::Sum(x) => {
                    let len = nodes[*x].value.len();
                    send(*x, vec![gd[0]; len]);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t, F: Real> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn req(&self) -> bool {
        self.tape.requires(self.id)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push(out, Op::Add(self.id, other.id), self.req() || other.req(), "add")
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push(out, Op::Mul(self.id, other.id), self.req() || other.req(), "mul")
    }

    pub fn scale(self, s: F) -> Result<Var<'t, F>, NumericsError> {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * s).collect())?;
        self.tape.push(out, Op::Scale(self.id, s), self.req(), "scale")
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = Tensor::new(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n))?;
        self.tape.push(out, Op::MatMul(self.id, other.id), self.req() || other.req(), "matmul")
    }

    /// `self[m×k] · weight[n×k]ᵀ`: a bias-free linear layer with the weight
    /// stored as `[out, in]`.
    pub fn linear(self, weight: Var<'t, F>) -> Result<Var<'t, F>, NumericsError> {
        let (x, w) = (self.value(), weight.value());
        if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.rows(), x.cols(), w.rows());
        let out = Tensor::new(vec![m, n], matmul_nt(x.data(), w.data(), m, k, n))?;
        self.tape.push(out, Op::Linear(self.id, weight.id), self.req() || weight.req(), "linear")
    }

    pub fn silu(self) -> Result<Var<'t, F>, NumericsError> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
        self.tape.push(Tensor::new(a.shape().to_vec(), data)?, Op::Silu(self.id), self.req(), "silu")
    }

    /// Row-wise RMS normalization followed by an elementwise gain.
    pub fn rmsnorm(self, gain: Var<'t, F>, eps: F) -> Result<Var<'t, F>, NumericsError> {
        let (x, g) = (self.value(), gain.value());
        let cols = x.cols();
        if g.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "rmsnorm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let n = F::from_f64(cols as f64);
        let mut inv_rms = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / n;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(g.data()).map(|(&v, &gv)| v * inv * gv));
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push(
            out,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            self.req() || gain.req(),
            "rmsnorm",
        )
    }

    /// Rotary position embedding applied independently to each of `heads`.
    pub fn rope(self, positions: &[usize], heads: usize) -> Result<Var<'t, F>, NumericsError> {
        let x = self.value();
        let cols = x.cols();
        if heads == 0 || !cols.is_multiple_of(heads) || !(cols / heads).is_multiple_of(2) || positions.len() != x.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "rope",
                lhs: x.shape().to_vec(),
                rhs: vec![positions.len(), heads],
            });
        }
        let data = kernels::rope(x.data(), cols, positions, heads, ROPE_BASE, false);
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Rope {
                x: self.id,
                positions: positions.to_vec(),
                heads,
            },
            self.req(),
            "rope",
        )
    }

    /// Multi-head attention with `self` as queries; query `i` sees keys
    /// `ranges[i].0 .. ranges[i].1`.
    pub fn attention(
        self,
        keys: Var<'t, F>,
        values: Var<'t, F>,
        heads: usize,
        ranges: &[(usize, usize)],
    ) -> Result<Var<'t, F>, NumericsError> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let cols = q.cols();
        let bad = heads == 0
            || cols % heads != 0
            || k.cols() != cols
            || k.shape() != v.shape()
            || ranges.len() != q.rows()
            || ranges.iter().any(|&(lo, hi)| lo >= hi || hi > k.rows());
        if bad {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let fwd = kernels::attention(q.data(), k.data(), v.data(), cols, heads, ranges);
        self.tape.push(
            Tensor::new(q.shape().to_vec(), fwd.out)?,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                ranges: ranges.to_vec(),
                probs: fwd.probs,
            },
            self.req() || keys.req() || values.req(),
            "attention",
        )
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, F>, NumericsError> {
        let t = self.value();
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, bound: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        self.tape.push(
            Tensor::new(vec![ids.len(), cols], data)?,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            self.req(),
            "gather_rows",
        )
    }

    pub fn softmax_rows(self) -> Result<Var<'t, F>, NumericsError> {
        let x = self.value();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(x.cols().max(1)) {
            super::softmax_in_place(row);
        }
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::SoftmaxRows(self.id),
            self.req(),
            "softmax",
        )
    }

    /// Sum over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, F>, NumericsError> {
        let x = self.value();
        let cols = x.cols();
        if targets.len() != x.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = x.data().to_vec();
        let mut loss = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(NumericsError::IndexOutOfRange { index: t, bound: cols });
            }
            let row = x.row(r);
            loss += super::log_sum_exp(row) - row[t];
            super::softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            self.req(),
            "cross_entropy",
        )
    }

    pub fn sum(self) -> Result<Var<'t, F>, NumericsError> {
        let x = self.value();
        let s: F = x.data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.req(), "sum")
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when it did not take part in the loss.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}
