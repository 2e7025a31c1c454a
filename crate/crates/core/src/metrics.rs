//! Sparsity measurements over activation matrices (`[tokens × experts]`).
//!
//! An expert is activated by a token when `|A_i| > threshold`; the default
//! threshold of zero counts exact nonzeros, which is what ReLU routing
//! produces. Every metric depends on the support only.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor2D};

#[inline]
fn active<T: Real>(v: T, threshold: f64) -> bool {
    v.f64().abs() > threshold
}

/// Token-level sparsity: mean fraction of inactive experts per token.
pub fn tls<T: Real>(a: &Tensor2D<T>, threshold: f64) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Empty("tls"));
    }
    let inactive = a.data().iter().filter(|&&v| !active(v, threshold)).count();
    Ok(inactive as f64 / a.len() as f64)
}

/// Chunk-level sparsity over aligned, disjoint chunks of `chunk` tokens; a
/// trailing partial chunk is dropped.
pub fn cls<T: Real>(a: &Tensor2D<T>, chunk: usize, threshold: f64) -> Result<f64> {
    if chunk == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    if a.cols() == 0 {
        return Err(Error::Empty("cls"));
    }
    if a.rows() < chunk {
        return Err(Error::SequenceTooShort { len: a.rows(), chunk });
    }
    let n_e = a.cols();
    let n_chunks = a.rows() / chunk;
    let mut touched = vec![false; n_e];
    let mut total = 0.0;
    for c in 0..n_chunks {
        touched.iter_mut().for_each(|t| *t = false);
        for r in c * chunk..(c + 1) * chunk {
            for (t, &v) in touched.iter_mut().zip(a.row(r)) {
                *t |= active(v, threshold);
            }
        }
        total += touched.iter().filter(|t| !**t).count() as f64 / n_e as f64;
    }
    Ok(total / n_chunks as f64)
}

/// Mean fraction of a token's activated experts that its successor also
/// activates. Tokens that activate nothing are skipped; `None` when no pair
/// remains.
pub fn reuse_ratio<T: Real>(a: &Tensor2D<T>, threshold: f64) -> Result<Option<f64>> {
    if a.rows() < 2 {
        return Err(Error::SequenceTooShort { len: a.rows(), chunk: 2 });
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for r in 0..a.rows() - 1 {
        let (cur, next) = (a.row(r), a.row(r + 1));
        let size = cur.iter().filter(|&&v| active(v, threshold)).count();
        if size == 0 {
            continue;
        }
        let shared = cur.iter().zip(next).filter(|(&c, &n)| active(c, threshold) && active(n, threshold)).count();
        sum += shared as f64 / size as f64;
        pairs += 1;
    }
    Ok((pairs > 0).then(|| sum / pairs as f64))
}

/// `1 − |∪_k S_k| / N_e` over every row of `a`.
pub fn union_sparsity<T: Real>(a: &Tensor2D<T>, threshold: f64) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Empty("union_sparsity"));
    }
    let touched = (0..a.cols()).filter(|&i| (0..a.rows()).any(|r| active(a[(r, i)], threshold))).count();
    Ok(1.0 - touched as f64 / a.cols() as f64)
}

/// Mean L2 norm of the activation rows.
pub fn activation_magnitude<T: Real>(a: &Tensor2D<T>) -> Result<f64> {
    if a.rows() == 0 {
        return Err(Error::Empty("activation_magnitude"));
    }
    let total: f64 = (0..a.rows()).map(|r| a.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()).sum();
    Ok(total / a.rows() as f64)
}

/// Per-token-id occurrence count and mean activated-expert ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AllocationHistogram {
    pub entries: BTreeMap<usize, AllocationEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AllocationEntry {
    pub frequency: usize,
    pub mean_ratio: f64,
}

impl AllocationHistogram {
    pub fn total(&self) -> usize {
        self.entries.values().map(|e| e.frequency).sum()
    }

    /// Folds another histogram into this one, weighting means by frequency.
    pub fn merge(&mut self, other: &AllocationHistogram) {
        for (&id, e) in &other.entries {
            let slot = self.entries.entry(id).or_default();
            let n = slot.frequency + e.frequency;
            slot.mean_ratio = (slot.mean_ratio * slot.frequency as f64 + e.mean_ratio * e.frequency as f64) / n as f64;
            slot.frequency = n;
        }
    }
}

pub fn allocation_histogram<T: Real>(
    token_ids: &[usize],
    a: &Tensor2D<T>,
    threshold: f64,
) -> Result<AllocationHistogram> {
    if token_ids.len() != a.rows() {
        return Err(Error::shape("allocation_histogram", format!("{} ids for {} rows", token_ids.len(), a.rows())));
    }
    let mut sums: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (r, &id) in token_ids.iter().enumerate() {
        let ratio = a.count_active(r, threshold) as f64 / a.cols() as f64;
        let slot = sums.entry(id).or_default();
        slot.0 += 1;
        slot.1 += ratio;
    }
    let entries =
        sums.into_iter().map(|(id, (n, s))| (id, AllocationEntry { frequency: n, mean_ratio: s / n as f64 })).collect();
    Ok(AllocationHistogram { entries })
}

/// Summary of one activation matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub tls: f64,
    /// `chunk length → CLS`.
    pub cls: BTreeMap<usize, f64>,
    pub reuse_ratio: Option<f64>,
    pub union_sparsity: Option<f64>,
    pub token_count: usize,
}

impl SparsityReport {
    /// Measures `a`; chunk lengths longer than the sequence are skipped.
    pub fn measure<T: Real>(a: &Tensor2D<T>, chunk_lens: &[usize], threshold: f64) -> Result<Self> {
        let mut cls_map = BTreeMap::new();
        for &l in chunk_lens {
            if l <= a.rows() {
                cls_map.insert(l, cls(a, l, threshold)?);
            }
        }
        let reuse = if a.rows() >= 2 { reuse_ratio(a, threshold)? } else { None };
        Ok(Self {
            tls: tls(a, threshold)?,
            cls: cls_map,
            reuse_ratio: reuse,
            union_sparsity: Some(union_sparsity(a, threshold)?),
            token_count: a.rows(),
        })
    }

    /// Token-weighted average over several sequences. Reuse is averaged over
    /// the sequences that define it.
    pub fn average(reports: &[SparsityReport]) -> Option<Self> {
        let tokens: usize = reports.iter().map(|r| r.token_count).sum();
        if tokens == 0 {
            return None;
        }
        let w = |r: &SparsityReport| r.token_count as f64 / tokens as f64;
        let mut cls_map = BTreeMap::new();
        let keys: std::collections::BTreeSet<usize> = reports.iter().flat_map(|r| r.cls.keys().copied()).collect();
        for l in keys {
            let (mut s, mut wt) = (0.0, 0.0);
            for r in reports {
                if let Some(v) = r.cls.get(&l) {
                    s += v * w(r);
                    wt += w(r);
                }
            }
            cls_map.insert(l, s / wt);
        }
        let reuse: Vec<f64> = reports.iter().filter_map(|r| r.reuse_ratio).collect();
        let unions: Vec<f64> = reports.iter().filter_map(|r| r.union_sparsity).collect();
        Some(Self {
            tls: reports.iter().map(|r| r.tls * w(r)).sum(),
            cls: cls_map,
            reuse_ratio: (!reuse.is_empty()).then(|| reuse.iter().sum::<f64>() / reuse.len() as f64),
            union_sparsity: (!unions.is_empty()).then(|| unions.iter().sum::<f64>() / unions.len() as f64),
            token_count: tokens,
        })
    }
}
