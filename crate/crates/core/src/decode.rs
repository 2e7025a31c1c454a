//! Draft-then-verify decoding with greedy acceptance.
//!
//! A verification step feeds `[last context token, d_1, …, d_n]` through the
//! target model in one pass. The FFN layers of those `n + 1` rows run
//! through the chunk kernel, and their per-layer expert union is what the
//! step is charged for. Attention is recomputed from scratch every step.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cost_accounting, ChunkUnionPlan};
use crate::model::{argmax, TransformerLm};
use crate::numerics::Real;

/// Draft proposer selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftPolicyKind {
    /// The target itself, run autoregressively; every draft is accepted.
    SelfGreedy,
    /// Back-off n-gram table built from a corpus.
    Ngram,
    /// Uniform random token ids.
    Random,
}

impl DraftPolicyKind {
    pub const ALL: [DraftPolicyKind; 3] = [Self::SelfGreedy, Self::Ngram, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::SelfGreedy => "self_greedy",
            Self::Ngram => "ngram",
            Self::Random => "random",
        }
    }
}

impl FromStr for DraftPolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown draft policy {s:?} (expected self_greedy, ngram or random)")))
    }
}

/// Most frequent successor of every context of length `1..=order`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramTable {
    pub order: usize,
    tables: Vec<BTreeMap<Vec<usize>, usize>>,
    fallback: usize,
}

fn most_frequent(counts: &BTreeMap<usize, usize>) -> usize {
    // Ascending key order plus strict comparison keeps the lowest id on ties.
    let mut best = (0, 0);
    for (&tok, &c) in counts {
        if c > best.1 {
            best = (tok, c);
        }
    }
    best.0
}

impl NgramTable {
    pub fn build(tokens: &[usize], order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be positive".into()));
        }
        let mut unigram = BTreeMap::new();
        for &t in tokens {
            *unigram.entry(t).or_insert(0) += 1;
        }
        let mut tables = Vec::with_capacity(order);
        for o in 1..=order {
            let mut counts: BTreeMap<Vec<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
            for w in tokens.windows(o + 1) {
                *counts.entry(w[..o].to_vec()).or_default().entry(w[o]).or_insert(0) += 1;
            }
            tables.push(counts.into_iter().map(|(ctx, c)| (ctx, most_frequent(&c))).collect());
        }
        Ok(Self { order, tables, fallback: most_frequent(&unigram) })
    }

    /// Prediction from the longest matching suffix of `context`.
    pub fn predict(&self, context: &[usize]) -> usize {
        for o in (1..=self.order.min(context.len())).rev() {
            if let Some(&t) = self.tables[o - 1].get(&context[context.len() - o..]) {
                return t;
            }
        }
        self.fallback
    }
}

/// A configured draft proposer.
#[derive(Debug, Clone)]
pub enum Drafter {
    SelfGreedy,
    Ngram(NgramTable),
    Random(Box<ChaCha8Rng>),
}

impl Drafter {
    pub fn kind(&self) -> DraftPolicyKind {
        match self {
            Self::SelfGreedy => DraftPolicyKind::SelfGreedy,
            Self::Ngram(_) => DraftPolicyKind::Ngram,
            Self::Random(_) => DraftPolicyKind::Random,
        }
    }

    /// Builds a drafter; `corpus` feeds the n-gram table.
    pub fn new(kind: DraftPolicyKind, corpus: &[usize], ngram_order: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            DraftPolicyKind::SelfGreedy => Self::SelfGreedy,
            DraftPolicyKind::Ngram => Self::Ngram(NgramTable::build(corpus, ngram_order)?),
            DraftPolicyKind::Random => Self::Random(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        })
    }
}

/// Context plus proposed continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DraftBatch {
    pub context: Vec<usize>,
    pub drafts: Vec<usize>,
    pub n: usize,
}

/// Proposes `n ≥ 1` draft tokens after `context`.
pub fn propose_drafts<T: Real>(
    model: &TransformerLm<T>,
    context: &[usize],
    drafter: &mut Drafter,
    n: usize,
) -> Result<DraftBatch> {
    if context.is_empty() {
        return Err(Error::Empty("propose_drafts context"));
    }
    if n == 0 {
        return Err(Error::Config("draft count must be at least 1".into()));
    }
    let vocab = model.config.vocab_size;
    let mut seq = context.to_vec();
    for _ in 0..n {
        let next = match drafter {
            Drafter::SelfGreedy => model.next_token(&seq)?,
            Drafter::Ngram(table) => table.predict(&seq).min(vocab - 1),
            Drafter::Random(rng) => rng.gen_range(0..vocab),
        };
        seq.push(next);
    }
    let drafts = seq.split_off(context.len());
    Ok(DraftBatch { context: seq, drafts, n })
}

/// Outcome of one verification pass.
#[derive(Debug, Clone)]
pub struct Verification {
    /// Length of the accepted draft prefix.
    pub accepted: usize,
    /// Target's own token after the accepted prefix.
    pub next_token: usize,
    /// Per-layer expert union of the `n + 1` verified rows.
    pub plans: Vec<ChunkUnionPlan>,
}

/// Greedy verification of a batch in one chunk pass. A batch with no
/// drafts degenerates to a single autoregressive step.
pub fn verify_chunk<T: Real>(model: &TransformerLm<T>, batch: &DraftBatch) -> Result<Verification> {
    if batch.context.is_empty() {
        return Err(Error::Empty("verify_chunk context"));
    }
    if batch.drafts.len() != batch.n {
        return Err(Error::Contract(format!("{} drafts for n = {}", batch.drafts.len(), batch.n)));
    }
    let mut seq = batch.context.clone();
    seq.extend_from_slice(&batch.drafts);
    let start = batch.context.len() - 1;
    let out = model.infer(&seq, start)?;
    let mut accepted = 0;
    while accepted < batch.n && batch.drafts[accepted] == argmax(out.logits.row(start + accepted)) {
        accepted += 1;
    }
    let next_token = argmax(out.logits.row(start + accepted));
    Ok(Verification { accepted, next_token, plans: out.chunk_plans })
}

/// Counters of a decoding run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecodeStats {
    pub accepted_lengths: Vec<usize>,
    pub tokens_generated: usize,
    /// Expert-weight bytes read by verification chunks.
    pub counted_ffn_bytes: u64,
    /// Bytes the same chunks would read with every expert active.
    pub counted_ffn_bytes_dense_equivalent: u64,
    /// Expert-weight bytes of one dense autoregressive token.
    pub dense_ar_bytes_per_token: u64,
    pub steps: usize,
}

impl DecodeStats {
    pub fn mean_accepted(&self) -> Option<f64> {
        (!self.accepted_lengths.is_empty())
            .then(|| self.accepted_lengths.iter().sum::<usize>() as f64 / self.accepted_lengths.len() as f64)
    }

    pub fn median_accepted(&self) -> Option<f64> {
        let mut v = self.accepted_lengths.clone();
        v.sort_unstable();
        match v.len() {
            0 => None,
            n if n % 2 == 1 => Some(v[n / 2] as f64),
            n => Some((v[n / 2 - 1] + v[n / 2]) as f64 / 2.0),
        }
    }

    pub fn bytes_per_token(&self) -> Option<f64> {
        (self.tokens_generated > 0).then(|| self.counted_ffn_bytes as f64 / self.tokens_generated as f64)
    }

    pub fn tokens_per_counted_gb(&self) -> Option<f64> {
        (self.counted_ffn_bytes > 0).then(|| self.tokens_generated as f64 / (self.counted_ffn_bytes as f64 / 1e9))
    }

    /// Plot-ready summary for the CLI.
    pub fn summary(&self) -> DecodeSummary {
        DecodeSummary {
            mean_accepted: self.mean_accepted(),
            median_accepted: self.median_accepted(),
            tokens_per_counted_gb: self.tokens_per_counted_gb(),
            bytes_per_token: self.bytes_per_token(),
            dense_ar_bytes_per_token: self.dense_ar_bytes_per_token,
            tokens_generated: self.tokens_generated,
            steps: self.steps,
        }
    }
}

/// JSON summary of a decoding run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub mean_accepted: Option<f64>,
    pub median_accepted: Option<f64>,
    pub tokens_per_counted_gb: Option<f64>,
    pub bytes_per_token: Option<f64>,
    pub dense_ar_bytes_per_token: u64,
    pub tokens_generated: usize,
    pub steps: usize,
}

/// Generated tokens and their cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub stats: DecodeStats,
}

fn check_room<T: Real>(model: &TransformerLm<T>, prompt: &[usize], max_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let needed = prompt.len() + max_tokens.saturating_sub(1);
    if needed > model.config.context {
        return Err(Error::Contract(format!(
            "prompt of {} plus {max_tokens} tokens exceeds the context of {}",
            prompt.len(),
            model.config.context
        )));
    }
    Ok(())
}

/// Plain greedy decoding, one full forward per token.
pub fn greedy_decode<T: Real>(model: &TransformerLm<T>, prompt: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
    check_room(model, prompt, max_tokens)?;
    let mut seq = prompt.to_vec();
    for _ in 0..max_tokens {
        let next = model.next_token(&seq)?;
        seq.push(next);
    }
    Ok(seq.split_off(prompt.len()))
}

/// Propose/verify until `max_tokens` tokens are produced. Near the end of
/// the context window fewer than `n` drafts are proposed.
pub fn decode_loop<T: Real>(
    model: &TransformerLm<T>,
    drafter: &mut Drafter,
    prompt: &[usize],
    max_tokens: usize,
    n: usize,
) -> Result<DecodeOutput> {
    check_room(model, prompt, max_tokens)?;
    if n == 0 {
        return Err(Error::Config("draft count must be at least 1".into()));
    }
    let ffn = &model.config.ffn;
    let per_expert = 2 * ffn.d_h as u64 * ffn.d_e as u64 * T::BYTES as u64;
    let mut stats = DecodeStats {
        dense_ar_bytes_per_token: model.config.n_layers as u64 * ffn.n_experts as u64 * per_expert,
        ..DecodeStats::default()
    };
    let mut seq = prompt.to_vec();
    while stats.tokens_generated < max_tokens {
        let room = model.config.context - seq.len();
        let batch = match n.min(room) {
            0 => DraftBatch { context: seq.clone(), drafts: Vec::new(), n: 0 },
            k => propose_drafts(model, &seq, drafter, k)?,
        };
        let v = verify_chunk(model, &batch)?;
        for plan in &v.plans {
            let cost = cost_accounting(plan, ffn, T::BYTES);
            stats.counted_ffn_bytes += cost.expert_weight_bytes_touched;
            stats.counted_ffn_bytes_dense_equivalent += cost.dense_expert_weight_bytes;
        }
        let remaining = max_tokens - stats.tokens_generated;
        let emitted: Vec<usize> =
            batch.drafts[..v.accepted].iter().copied().chain([v.next_token]).take(remaining).collect();
        stats.tokens_generated += emitted.len();
        seq.extend(emitted);
        stats.accepted_lengths.push(v.accepted);
        stats.steps += 1;
    }
    Ok(DecodeOutput { tokens: seq.split_off(prompt.len()), stats })
}
