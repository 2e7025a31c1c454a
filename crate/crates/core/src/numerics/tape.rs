//! Reverse-mode gradient tape.
//!
//! Each recorded primitive keeps the inputs its hand-derived backward needs.
//! `backward` walks the records in exact reverse order of recording.

use super::ops::{self, AttnShape, Elementwise};
use super::{Real, Tensor2D};
use crate::error::{Error, Result};
use crate::ffn::moe::MoeRecord;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Unary(Var, Elementwise),
    RmsNormRows {
        input: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    SoftmaxRows(Var),
    /// Keeps selected entries; the gradient passes straight through them.
    Select {
        input: Var,
        mask: Vec<bool>,
    },
    /// Divides each row by its sum; all-zero rows stay zero.
    NormalizeRows {
        input: Var,
        sums: Vec<T>,
    },
    /// Prepends `count` constant columns.
    PadCols {
        input: Var,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    Moe(Box<MoeRecord<T>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor2D<T>,
    },
    /// Scalar whose gradient with respect to `input` was derived in closed form
    /// when the value was computed.
    ScalarLoss {
        input: Var,
        grad: Tensor2D<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T: Real> {
    value: Tensor2D<T>,
    op: Op<T>,
}

/// Single-owner record of primitive applications.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor2D<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2D<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn unary(&mut self, a: Var, op: Elementwise) -> Var {
        let out = self.value(a).map(|z| op.apply(z));
        self.push(out, Op::Unary(a, op))
    }

    /// Row-wise RMSNorm with a `1 × cols` gain.
    pub fn rmsnorm_rows(&mut self, input: Var, gain: Var, eps: T) -> Result<Var> {
        let g = self.value(gain);
        if g.rows() != 1 || g.cols() != self.value(input).cols() {
            return Err(Error::shape("rmsnorm_rows", format!("gain {:?}", g.shape())));
        }
        let (out, inv_rms) = ops::rmsnorm_rows(self.value(input), g.data(), eps);
        Ok(self.push(out, Op::RmsNormRows { input, gain, inv_rms }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn select(&mut self, input: Var, mask: Vec<bool>) -> Var {
        let mut out = self.value(input).clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *v = T::zero();
            }
        }
        self.push(out, Op::Select { input, mask })
    }

    pub fn normalize_rows(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        let mut sums = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s: T = row.iter().copied().sum();
            if s > T::zero() {
                row.iter_mut().for_each(|v| *v /= s);
            }
            sums.push(s);
        }
        self.push(out, Op::NormalizeRows { input, sums })
    }

    pub fn pad_cols(&mut self, input: Var, count: usize, value: T) -> Var {
        let x = self.value(input);
        let mut out = Tensor2D::zeros(x.rows(), x.cols() + count);
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            row[..count].iter_mut().for_each(|v| *v = value);
            row[count..].copy_from_slice(x.row(r));
        }
        self.push(out, Op::PadCols { input, count })
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor2D::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Contract(format!("id {id} outside table of {} rows", t.rows())));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.shape() != kt.shape() || qt.shape() != vt.shape() {
            return Err(Error::shape("attention", "q/k/v shapes differ"));
        }
        if qt.cols() % shape.heads != 0 || qt.rows() % shape.seq_len != 0 {
            return Err(Error::shape("attention", format!("{:?} with {shape:?}", qt.shape())));
        }
        let (out, probs) = ops::causal_attention(qt, kt, vt, shape);
        Ok(self.push(out, Op::Attention { q, k, v, shape, probs }))
    }

    pub(crate) fn moe(&mut self, out: Tensor2D<T>, record: MoeRecord<T>) -> Var {
        self.push(out, Op::Moe(Box::new(record)))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(Tensor2D::filled(1, 1, loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Records a scalar loss computed outside the tape together with its
    /// gradient with respect to `input`.
    pub fn scalar_loss(&mut self, input: Var, value: T, grad: Tensor2D<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape("scalar_loss", "gradient shape differs from input"));
        }
        Ok(self.push(Tensor2D::filled(1, 1, value), Op::ScalarLoss { input, grad }))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != (1, 1) {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += w * t[(0, 0)];
        }
        Ok(self.push(Tensor2D::filled(1, 1, total), Op::WeightedSum(terms.to_vec())))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let seed = Tensor2D::filled(1, 1, T::one());
        self.backward_from(root, seed)
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_from(&self, root: Var, upstream: Tensor2D<T>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor2D<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes.is_empty() {
            return Grads { grads };
        }
        grads[root.0] = Some(upstream);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = ops::mm_nt(&g, self.value(*b));
                    let db = ops::mm_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Unary(a, op) => {
                    let d = ops::elementwise_backward(*op, self.value(*a), &node.value, &g);
                    accumulate(&mut grads, *a, d);
                }
                Op::RmsNormRows { input, gain, inv_rms } => {
                    let (dx, dg) =
                        ops::rmsnorm_rows_backward(self.value(*input), self.value(*gain).data(), inv_rms, &g);
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gain, Tensor2D::from_vec(1, dg.len(), dg).expect("gain row"));
                }
                Op::SoftmaxRows(a) => {
                    accumulate(&mut grads, *a, ops::softmax_rows_backward(&node.value, &g));
                }
                Op::Select { input, mask } => {
                    let mut d = g;
                    for (v, &keep) in d.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::NormalizeRows { input, sums } => {
                    let mut d = Tensor2D::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let s = sums[r];
                        if s <= T::zero() {
                            continue;
                        }
                        let p = node.value.row(r);
                        let gr = g.row(r);
                        let inner = ops::dot(p, gr);
                        for (dv, &gv) in d.row_mut(r).iter_mut().zip(gr) {
                            *dv = (gv - inner) / s;
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::PadCols { input, count } => {
                    let x = self.value(*input);
                    let mut d = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[*count..]);
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Tensor2D::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = ops::causal_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        *shape,
                        &g,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Moe(rec) => {
                    for (var, d) in rec.backward(self, &g) {
                        accumulate(&mut grads, var, d);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let d = ops::cross_entropy_backward(probs, targets, g[(0, 0)]);
                    accumulate(&mut grads, *logits, d);
                }
                Op::ScalarLoss { input, grad } => {
                    accumulate(&mut grads, *input, grad.scale(g[(0, 0)]));
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Tensor2D::filled(1, 1, w * g[(0, 0)]));
                    }
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor2D<T>>], v: Var, d: Tensor2D<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Gradients produced by [`Tape::backward`]; only leaves retain theirs.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor2D<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor2D<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2D<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn wrt(&self, v: Var, like: &Tensor2D<T>) -> Tensor2D<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor2D::zeros(like.rows(), like.cols()))
    }
}
