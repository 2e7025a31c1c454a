//! Training objectives on router activations.
//!
//! Each loss comes in two forms: a plain value function, and a
//! `*_with_grad` variant returning the closed-form gradient with respect to
//! its input matrix, which the trainer records on the tape as a scalar leaf.
//!
//! Row layout: rows are tokens, grouped into equal-length sequences. Pair and
//! chunk structure never crosses a sequence boundary.

pub mod scheduler;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Real, Tensor2D};

pub use scheduler::{scheduler_step, SchedulerState};

/// Clamp bounds for the locality-loss prediction.
pub const BCE_CLAMP: f64 = 1e-7;
/// Upper clamp on per-token expert probability before `ln(1 − p)`.
pub const CS_CLAMP: f64 = 1e-6;
/// Default sigmoid sharpness of the locality loss.
pub const DEFAULT_ALPHA: f64 = 10.0;

fn check_segments<T: Real>(t: &Tensor2D<T>, seq_len: usize, what: &'static str) -> Result<usize> {
    if seq_len == 0 || t.rows() % seq_len != 0 {
        return Err(Error::shape(what, format!("{} rows do not split into sequences of {seq_len}", t.rows())));
    }
    Ok(t.rows() / seq_len)
}

fn check_nonnegative<T: Real>(t: &Tensor2D<T>, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(**v >= T::zero())) {
        Some(v) => Err(Error::Contract(format!("{what} requires non-negative activations, found {v}"))),
        None => Ok(()),
    }
}

/// Activation locality: mean BCE between the soft pattern `σ(α·A⁰)` of each
/// token (prediction) and of its successor (target).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalityLoss {
    pub alpha: f64,
    /// Stop the gradient through the successor's pattern.
    pub detach_target: bool,
}

impl Default for LocalityLoss {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, detach_target: false }
    }
}

impl LocalityLoss {
    /// Value and `∂L/∂A⁰` over sequences of `seq_len` rows.
    pub fn with_grad<T: Real>(&self, a0: &Tensor2D<T>, seq_len: usize) -> Result<(T, Tensor2D<T>)> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config("locality sharpness must be positive".into()));
        }
        let n_seq = check_segments(a0, seq_len, "activation_locality_loss")?;
        let n_e = a0.cols();
        let mut grad = Tensor2D::zeros(a0.rows(), n_e);
        let pairs = n_seq * (seq_len - 1) * n_e;
        if pairs == 0 {
            return Ok((T::zero(), grad));
        }
        let alpha = T::lit(self.alpha);
        let (lo, hi) = (T::lit(BCE_CLAMP), T::lit(1.0 - BCE_CLAMP));
        let scale = T::one() / T::lit(pairs as f64);
        let mut total = T::zero();
        for s in 0..n_seq {
            for k in 0..seq_len - 1 {
                let (r, r1) = (s * seq_len + k, s * seq_len + k + 1);
                for i in 0..n_e {
                    let p = sigmoid(alpha * a0[(r, i)]);
                    let q = sigmoid(alpha * a0[(r1, i)]);
                    let pc = p.max(lo).min(hi);
                    total += -(q * pc.ln() + (T::one() - q) * (T::one() - pc).ln());
                    if p > lo && p < hi {
                        let dp = -q / pc + (T::one() - q) / (T::one() - pc);
                        grad[(r, i)] += scale * dp * alpha * p * (T::one() - p);
                    }
                    if !self.detach_target {
                        let dq = ((T::one() - pc) / pc).ln();
                        grad[(r1, i)] += scale * dq * alpha * q * (T::one() - q);
                    }
                }
            }
        }
        Ok((total * scale, grad))
    }
}

/// Activation locality loss of a single sequence; zero for one token.
pub fn activation_locality_loss<T: Real>(a0: &Tensor2D<T>, alpha: f64) -> Result<T> {
    if a0.rows() == 0 {
        return Err(Error::Empty("activation_locality_loss"));
    }
    Ok(LocalityLoss { alpha, detach_target: false }.with_grad(a0, a0.rows())?.0)
}

/// Chunk sparsification over aligned chunks of `chunk_len` rows: mean over
/// chunks and experts of the probability that the expert is activated by at
/// least one token of the chunk.
pub fn chunk_sparsification_with_grad<T: Real>(a1: &Tensor2D<T>, chunk_len: usize) -> Result<(T, Tensor2D<T>)> {
    check_nonnegative(a1, "chunk_sparsification_loss")?;
    let n_chunks = check_segments(a1, chunk_len, "chunk_sparsification_loss")?;
    let n_e = a1.cols();
    let mut grad = Tensor2D::zeros(a1.rows(), n_e);
    if n_chunks == 0 || n_e == 0 {
        return Err(Error::Empty("chunk_sparsification_loss"));
    }
    let cap = T::lit(1.0 - CS_CLAMP);
    let scale = T::one() / T::lit((n_chunks * n_e) as f64);
    let mut total = T::zero();
    let mut probs = vec![T::zero(); chunk_len * n_e];
    let mut sums = vec![T::zero(); chunk_len];
    let mut log_keep = vec![T::zero(); n_e];
    for c in 0..n_chunks {
        log_keep.iter_mut().for_each(|v| *v = T::zero());
        for k in 0..chunk_len {
            let row = a1.row(c * chunk_len + k);
            let s: T = row.iter().copied().sum();
            sums[k] = s;
            for i in 0..n_e {
                let p = if s > T::zero() { row[i] / s } else { T::zero() };
                probs[k * n_e + i] = p;
                log_keep[i] += (T::one() - p.min(cap)).ln();
            }
        }
        for i in 0..n_e {
            total += T::one() - log_keep[i].exp();
        }
        // ∂P_i/∂p_ik = exp(Σ ln(1 − p_i·)) / (1 − p_ik) where unclamped.
        for k in 0..chunk_len {
            let s = sums[k];
            if s <= T::zero() {
                continue;
            }
            let p = &probs[k * n_e..(k + 1) * n_e];
            let g: Vec<T> = (0..n_e)
                .map(|i| if p[i] < cap { scale * log_keep[i].exp() / (T::one() - p[i]) } else { T::zero() })
                .collect();
            let inner: T = g.iter().zip(p).map(|(&gi, &pi)| gi * pi).sum();
            let grow = grad.row_mut(c * chunk_len + k);
            for i in 0..n_e {
                grow[i] = (g[i] - inner) / s;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Chunk sparsification loss treating all rows as one chunk.
pub fn chunk_sparsification_loss<T: Real>(a1: &Tensor2D<T>) -> Result<T> {
    if a1.rows() == 0 {
        return Err(Error::Empty("chunk_sparsification_loss"));
    }
    Ok(chunk_sparsification_with_grad(a1, a1.rows())?.0)
}

/// Mean over tokens of `Σ_i |A_i|`, with its gradient.
pub fn l1_with_grad<T: Real>(a: &Tensor2D<T>) -> Result<(T, Tensor2D<T>)> {
    if a.rows() == 0 {
        return Err(Error::Empty("l1_loss"));
    }
    let n = T::lit(a.rows() as f64);
    let total: T = a.data().iter().map(|v| v.abs()).sum();
    let grad = a.map(|v| {
        if v > T::zero() {
            T::one() / n
        } else if v < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    Ok((total / n, grad))
}

pub fn l1_loss<T: Real>(a: &Tensor2D<T>) -> Result<T> {
    Ok(l1_with_grad(a)?.0)
}

/// Normalizes non-negative rows to sum one; all-zero rows stay zero.
fn normalize<T: Real>(a1: &Tensor2D<T>) -> (Tensor2D<T>, Vec<T>) {
    let mut p = a1.clone();
    let mut sums = Vec::with_capacity(a1.rows());
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let s: T = row.iter().copied().sum();
        if s > T::zero() {
            row.iter_mut().for_each(|v| *v /= s);
        }
        sums.push(s);
    }
    (p, sums)
}

/// Pulls `∂L/∂p` back through the row normalization.
fn normalize_backward<T: Real>(p: &Tensor2D<T>, sums: &[T], dp: &Tensor2D<T>) -> Tensor2D<T> {
    let mut d = Tensor2D::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        if sums[r] <= T::zero() {
            continue;
        }
        let inner: T = p.row(r).iter().zip(dp.row(r)).map(|(&a, &b)| a * b).sum();
        for (dv, &g) in d.row_mut(r).iter_mut().zip(dp.row(r)) {
            *dv = (g - inner) / sums[r];
        }
    }
    d
}

/// Mean over tokens of the entropy of the normalized ReLU pattern
/// (`0 · ln 0 := 0`), with its gradient.
pub fn router_entropy_with_grad<T: Real>(a1: &Tensor2D<T>) -> Result<(T, Tensor2D<T>)> {
    check_nonnegative(a1, "router_entropy_loss")?;
    if a1.rows() == 0 {
        return Err(Error::Empty("router_entropy_loss"));
    }
    let n = T::lit(a1.rows() as f64);
    let (p, sums) = normalize(a1);
    let mut total = T::zero();
    let mut dp = Tensor2D::zeros(p.rows(), p.cols());
    for (d, &pv) in dp.data_mut().iter_mut().zip(p.data()) {
        if pv > T::zero() {
            total -= pv * pv.ln();
            *d = -(pv.ln() + T::one()) / n;
        }
    }
    Ok((total / n, normalize_backward(&p, &sums, &dp)))
}

pub fn router_entropy_loss<T: Real>(a1: &Tensor2D<T>) -> Result<T> {
    Ok(router_entropy_with_grad(a1)?.0)
}

/// Switch-style balancing `N_e · Σ_i f_i · P_i`, where `f_i` is expert `i`'s
/// share of all activations and `P_i` its mean normalized probability. The
/// gradient flows through `P_i` only.
pub fn load_balance_with_grad<T: Real>(a1: &Tensor2D<T>) -> Result<(T, Tensor2D<T>)> {
    check_nonnegative(a1, "load_balance_loss")?;
    if a1.rows() == 0 {
        return Err(Error::Empty("load_balance_loss"));
    }
    let (n, n_e) = a1.shape();
    let mut counts = vec![0usize; n_e];
    for r in 0..n {
        for (c, v) in counts.iter_mut().zip(a1.row(r)) {
            if *v > T::zero() {
                *c += 1;
            }
        }
    }
    let active: usize = counts.iter().sum();
    let (p, sums) = normalize(a1);
    let mut grad = Tensor2D::zeros(n, n_e);
    if active == 0 {
        return Ok((T::zero(), grad));
    }
    let f: Vec<T> = counts.iter().map(|&c| T::lit(c as f64 / active as f64)).collect();
    let ne = T::lit(n_e as f64);
    let nt = T::lit(n as f64);
    let mut total = T::zero();
    for i in 0..n_e {
        let mean_p: T = (0..n).map(|r| p[(r, i)]).sum::<T>() / nt;
        total += f[i] * mean_p;
    }
    let mut dp = Tensor2D::zeros(n, n_e);
    for r in 0..n {
        for i in 0..n_e {
            dp[(r, i)] = ne * f[i] / nt;
        }
    }
    grad = normalize_backward(&p, &sums, &dp);
    Ok((ne * total, grad))
}

pub fn load_balance_loss<T: Real>(a1: &Tensor2D<T>) -> Result<T> {
    Ok(load_balance_with_grad(a1)?.0)
}

/// Composition of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub lm: f64,
    pub al: f64,
    /// Value of the active sparsifier (chunk sparsification, or its L1 /
    /// entropy substitute).
    pub cs: f64,
    pub aux: f64,
    pub lambda_al: f64,
    pub lambda_cs: f64,
    pub lambda_aux: f64,
    pub total: f64,
}

/// `L_total = L_lm + λ_al·L_al + λ_cs·L_cs`.
pub fn total_loss(lm: f64, al: f64, cs: f64, lambda_al: f64, lambda_cs: f64) -> Result<LossBundle> {
    LossBundle::compose(lm, al, cs, 0.0, lambda_al, lambda_cs, 0.0)
}

impl LossBundle {
    pub fn compose(
        lm: f64,
        al: f64,
        cs: f64,
        aux: f64,
        lambda_al: f64,
        lambda_cs: f64,
        lambda_aux: f64,
    ) -> Result<Self> {
        let parts = [lm, al, cs, aux, lambda_al, lambda_cs, lambda_aux];
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("total_loss"));
        }
        let total = lm + lambda_al * al + lambda_cs * cs + lambda_aux * aux;
        Ok(Self { lm, al, cs, aux, lambda_al, lambda_cs, lambda_aux, total })
    }
}
