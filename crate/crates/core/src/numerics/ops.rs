//! Pure forward/backward primitives.
//!
//! Every reduction runs in a fixed ascending index order, so a given output
//! element is bit-reproducible regardless of how many other rows share the
//! call. The inference kernels rely on this to match the training path exactly.

use super::{Real, Tensor2D, LOG_FLOOR};
use crate::error::{Error, Result};

/// `a · b`.
pub fn matmul<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", format!("{}x{} · {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(mm(a, b))
}

/// Unchecked `a · b`. Each output element accumulates over the shared
/// dimension in ascending order starting from zero.
pub fn mm<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Tensor2D<T> {
    debug_assert_eq!(a.cols(), b.rows());
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor2D::zeros(n, m);
    let bd = b.data();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-vector times matrix, accumulating into `out` (`out += x · b`).
#[inline]
pub fn vec_mat_acc<T: Real>(x: &[T], b: &Tensor2D<T>, out: &mut [T]) {
    let m = b.cols();
    let bd = b.data();
    for (p, &xv) in x.iter().enumerate() {
        let brow = &bd[p * m..(p + 1) * m];
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += xv * bv;
        }
    }
}

/// `aᵀ · b`.
pub fn mm_tn<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Tensor2D<T> {
    debug_assert_eq!(a.rows(), b.rows());
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor2D::zeros(n, m);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`.
pub fn mm_nt<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Tensor2D<T> {
    debug_assert_eq!(a.cols(), b.cols());
    let (n, m) = (a.rows(), b.rows());
    let mut out = Tensor2D::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out[(i, j)] = dot(arow, b.row(j));
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn swish<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// d swish / dz.
#[inline]
pub fn swish_grad<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// Elementwise primitive selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Relu,
    Swish,
    Sigmoid,
    /// Natural log of `max(x, LOG_FLOOR)`.
    Log,
    Exp,
    Clamp {
        lo: f64,
        hi: f64,
    },
}

impl Elementwise {
    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Elementwise::Relu => z.max(T::zero()),
            Elementwise::Swish => swish(z),
            Elementwise::Sigmoid => sigmoid(z),
            Elementwise::Log => z.max(T::lit(LOG_FLOOR)).ln(),
            Elementwise::Exp => z.exp(),
            Elementwise::Clamp { lo, hi } => z.max(T::lit(lo)).min(T::lit(hi)),
        }
    }

    /// Derivative at input `z` given the forward output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, z: T, y: T) -> T {
        match self {
            Elementwise::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::Swish => swish_grad(z),
            Elementwise::Sigmoid => y * (T::one() - y),
            Elementwise::Log => {
                if z > T::lit(LOG_FLOOR) {
                    T::one() / z
                } else {
                    T::zero()
                }
            }
            Elementwise::Exp => y,
            Elementwise::Clamp { lo, hi } => {
                if z > T::lit(lo) && z < T::lit(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Applies an elementwise primitive, failing if any output is non-finite.
pub fn elementwise<T: Real>(op: Elementwise, t: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let out = t.map(|z| op.apply(z));
    out.ensure_finite(match op {
        Elementwise::Relu => "relu",
        Elementwise::Swish => "swish",
        Elementwise::Sigmoid => "sigmoid",
        Elementwise::Log => "log",
        Elementwise::Exp => "exp",
        Elementwise::Clamp { .. } => "clamp",
    })?;
    Ok(out)
}

pub fn elementwise_backward<T: Real>(
    op: Elementwise,
    input: &Tensor2D<T>,
    output: &Tensor2D<T>,
    upstream: &Tensor2D<T>,
) -> Tensor2D<T> {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(upstream.data())
        .map(|((&z, &y), &g)| g * op.derivative(z, y))
        .collect();
    Tensor2D::from_vec(input.rows(), input.cols(), data).expect("shape preserved")
}

/// `gain_i · v_i / sqrt(mean(v²) + eps)`.
pub fn rmsnorm<T: Real>(v: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if v.len() != gain.len() {
        return Err(Error::shape("rmsnorm", format!("{} values, {} gains", v.len(), gain.len())));
    }
    if eps <= T::zero() {
        return Err(Error::Contract("rmsnorm eps must be positive".into()));
    }
    let mut out = vec![T::zero(); v.len()];
    rmsnorm_into(v, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns the inverse RMS.
#[inline]
pub fn rmsnorm_into<T: Real>(v: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::lit(v.len() as f64);
    let ms = v.iter().map(|&x| x * x).sum::<T>() / n;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &x), &g) in out.iter_mut().zip(v).zip(gain) {
        *o = g * x * inv;
    }
    inv
}

/// Row-wise RMSNorm; returns the output and the per-row inverse RMS.
pub fn rmsnorm_rows<T: Real>(t: &Tensor2D<T>, gain: &[T], eps: T) -> (Tensor2D<T>, Vec<T>) {
    let mut out = Tensor2D::zeros(t.rows(), t.cols());
    let mut inv = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        inv.push(rmsnorm_into(t.row(r), gain, eps, out.row_mut(r)));
    }
    (out, inv)
}

/// Backward of [`rmsnorm_rows`]: returns `(d_input, d_gain)`.
pub fn rmsnorm_rows_backward<T: Real>(
    input: &Tensor2D<T>,
    gain: &[T],
    inv_rms: &[T],
    upstream: &Tensor2D<T>,
) -> (Tensor2D<T>, Vec<T>) {
    let n = T::lit(input.cols() as f64);
    let mut dx = Tensor2D::zeros(input.rows(), input.cols());
    let mut dg = vec![T::zero(); gain.len()];
    for r in 0..input.rows() {
        let v = input.row(r);
        let dy = upstream.row(r);
        let inv = inv_rms[r];
        let mut proj = T::zero();
        for i in 0..v.len() {
            proj += dy[i] * gain[i] * v[i];
            dg[i] += dy[i] * v[i] * inv;
        }
        let coef = proj * inv * inv * inv / n;
        let dxr = dx.row_mut(r);
        for i in 0..v.len() {
            dxr[i] = inv * gain[i] * dy[i] - v[i] * coef;
        }
    }
    (dx, dg)
}

/// Softmax of each row in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows<T: Real>(t: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = t.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_rows_backward<T: Real>(probs: &Tensor2D<T>, upstream: &Tensor2D<T>) -> Tensor2D<T> {
    let mut dx = Tensor2D::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = upstream.row(r);
        let inner = dot(p, g);
        for (d, (&pv, &gv)) in dx.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *d = pv * (gv - inner);
        }
    }
    dx
}

/// Mean token negative log-likelihood and the saved softmax.
pub fn cross_entropy<T: Real>(logits: &Tensor2D<T>, targets: &[usize]) -> Result<(T, Tensor2D<T>)> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("cross_entropy", format!("{} rows, {} targets", logits.rows(), targets.len())));
    }
    if targets.is_empty() {
        return Err(Error::Empty("cross_entropy targets"));
    }
    let probs = softmax_rows(logits);
    let mut nll = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Contract(format!("target {t} outside vocabulary {}", logits.cols())));
        }
        nll -= probs[(r, t)].max(T::min_positive_value()).ln();
    }
    Ok((nll / T::lit(targets.len() as f64), probs))
}

pub fn cross_entropy_backward<T: Real>(probs: &Tensor2D<T>, targets: &[usize], upstream: T) -> Tensor2D<T> {
    let scale = upstream / T::lit(targets.len() as f64);
    let mut d = probs.scale(scale);
    for (r, &t) in targets.iter().enumerate() {
        d[(r, t)] -= scale;
    }
    d
}

/// Geometry of a batched causal self-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub heads: usize,
    pub seq_len: usize,
}

/// Causal multi-head attention over `rows / seq_len` independent sequences.
/// Returns the concatenated head outputs and the saved attention weights,
/// laid out as `[seq][head][i][j]` for `j <= i`.
pub fn causal_attention<T: Real>(
    q: &Tensor2D<T>,
    k: &Tensor2D<T>,
    v: &Tensor2D<T>,
    shape: AttnShape,
) -> (Tensor2D<T>, Vec<T>) {
    let d = q.cols();
    let hd = d / shape.heads;
    let t = shape.seq_len;
    let n_seq = q.rows() / t;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = Tensor2D::zeros(q.rows(), d);
    let mut probs = vec![T::zero(); n_seq * shape.heads * t * t];
    let mut scores = vec![T::zero(); t];
    for s in 0..n_seq {
        for h in 0..shape.heads {
            let cols = h * hd..(h + 1) * hd;
            let pbase = (s * shape.heads + h) * t * t;
            for i in 0..t {
                let qi = &q.row(s * t + i)[cols.clone()];
                for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                    *sc = dot(qi, &k.row(s * t + j)[cols.clone()]) * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                probs[pbase + i * t..pbase + i * t + i + 1].copy_from_slice(&scores[..=i]);
                let orow = &mut out.row_mut(s * t + i)[cols.clone()];
                for (j, &p) in scores.iter().enumerate().take(i + 1) {
                    let vj = &v.row(s * t + j)[cols.clone()];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`causal_attention`]: returns `(dq, dk, dv)`.
pub fn causal_attention_backward<T: Real>(
    q: &Tensor2D<T>,
    k: &Tensor2D<T>,
    v: &Tensor2D<T>,
    probs: &[T],
    shape: AttnShape,
    upstream: &Tensor2D<T>,
) -> (Tensor2D<T>, Tensor2D<T>, Tensor2D<T>) {
    let d = q.cols();
    let hd = d / shape.heads;
    let t = shape.seq_len;
    let n_seq = q.rows() / t;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dq = Tensor2D::zeros(q.rows(), d);
    let mut dk = Tensor2D::zeros(q.rows(), d);
    let mut dv = Tensor2D::zeros(q.rows(), d);
    let mut dp = vec![T::zero(); t];
    for s in 0..n_seq {
        for h in 0..shape.heads {
            let c0 = h * hd;
            let pbase = (s * shape.heads + h) * t * t;
            for i in 0..t {
                let gi = &upstream.row(s * t + i)[c0..c0 + hd];
                let p = &probs[pbase + i * t..pbase + i * t + i + 1];
                let mut inner = T::zero();
                for j in 0..=i {
                    dp[j] = dot(gi, &v.row(s * t + j)[c0..c0 + hd]);
                    inner += dp[j] * p[j];
                    let dvr = &mut dv.row_mut(s * t + j)[c0..c0 + hd];
                    for (o, &g) in dvr.iter_mut().zip(gi) {
                        *o += p[j] * g;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj: Vec<T> = k.row(s * t + j)[c0..c0 + hd].to_vec();
                    let qi: Vec<T> = q.row(s * t + i)[c0..c0 + hd].to_vec();
                    for (o, &kv) in dq.row_mut(s * t + i)[c0..c0 + hd].iter_mut().zip(&kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk.row_mut(s * t + j)[c0..c0 + hd].iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2D<f64> {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = t(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -1.0], &[0.0, 7.0, 2.0]]);
        assert_eq!(matmul(&Tensor2D::identity(3), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Tensor2D::identity(3)).unwrap(), m);
        assert_eq!(matmul(&Tensor2D::zeros(3, 3), &m).unwrap(), Tensor2D::zeros(3, 3));
    }

    #[test]
    fn matmul_small_product() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), t(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor2D::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]);
        let b = t(&[&[0.5, 1.0, -2.0], &[3.0, 1.0, 1.0]]);
        assert_eq!(mm_tn(&a, &b), mm(&a.transpose(), &b));
        assert_eq!(mm_nt(&a, &b), mm(&a, &b.transpose()));
    }

    #[test]
    fn elementwise_values() {
        let x = t(&[&[-1.0, 2.0]]);
        assert_eq!(elementwise(Elementwise::Relu, &x).unwrap(), t(&[&[0.0, 2.0]]));
        assert_eq!(Elementwise::Swish.apply(0.0f64), 0.0);
        let s1 = Elementwise::Swish.apply(1.0f64);
        assert!((s1 - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((s1 - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn elementwise_rejects_overflow() {
        let x = t(&[&[1000.0]]);
        assert!(matches!(elementwise(Elementwise::Exp, &x), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn log_clamps_at_floor() {
        let x = t(&[&[0.0, -3.0]]);
        let y = elementwise(Elementwise::Log, &x).unwrap();
        assert!((y[(0, 0)] - LOG_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(y[(0, 0)], y[(0, 1)]);
    }

    #[test]
    fn rmsnorm_cases() {
        let z = rmsnorm(&[0.0f64; 4], &[1.0; 4], 1e-6).unwrap();
        assert_eq!(z, vec![0.0; 4]);

        let ones = rmsnorm(&[1.0f64; 4], &[1.0; 4], 1e-300).unwrap();
        for v in ones {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let y = rmsnorm(&[3.0f64, 0.0, 0.0, 4.0], &[1.0; 4], 1e-6).unwrap();
        let denom = (25.0f64 / 4.0 + 1e-6).sqrt();
        assert_eq!(y[1], 0.0);
        assert_eq!(y[2], 0.0);
        assert!((y[0] - 3.0 / denom).abs() < 1e-14);
        assert!((y[3] - 4.0 / denom).abs() < 1e-14);
    }

    #[test]
    fn rmsnorm_length_mismatch() {
        assert!(rmsnorm(&[1.0f64, 2.0], &[1.0], 1e-6).is_err());
    }

    #[test]
    fn attention_rows_do_not_depend_on_later_tokens() {
        let mut rng = rand::thread_rng();
        let q = Tensor2D::<f64>::randn(6, 8, 1.0, &mut rng);
        let k = Tensor2D::<f64>::randn(6, 8, 1.0, &mut rng);
        let v = Tensor2D::<f64>::randn(6, 8, 1.0, &mut rng);
        let full = causal_attention(&q, &k, &v, AttnShape { heads: 2, seq_len: 6 }).0;
        let head = causal_attention(
            &q.slice_rows(0, 4),
            &k.slice_rows(0, 4),
            &v.slice_rows(0, 4),
            AttnShape { heads: 2, seq_len: 4 },
        )
        .0;
        assert_eq!(full.slice_rows(0, 4), head);
    }
}
