//! Toy causal language model: token and position embeddings, pre-norm
//! blocks of causal multi-head attention plus a BlockFFN layer, a final
//! RMSNorm and an untied output head.
//!
//! Two forwards share the parameters. [`TransformerLm::record`] builds the
//! training graph over a batch of equal-length sequences.
//! [`TransformerLm::infer`] runs a single sequence; every row it computes
//! depends only on that row and earlier ones, so the logits of a prefix do
//! not change when tokens are appended.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{self, record_ffn, FfnConfig, FfnParams, FfnVars, RouterVars};
use crate::kernel::{build_union_plan, sparse_chunk_ffn, ChunkUnionPlan};
use crate::numerics::ops::{self, AttnShape};
use crate::numerics::{Real, Tape, Tensor2D, Var, RMS_EPS};

/// Shape of the language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Maximum sequence length (learned positions).
    pub context: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn: FfnConfig,
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        self.ffn.d_h
    }

    pub fn validate(&self) -> Result<()> {
        self.ffn.validate()?;
        if self.vocab_size == 0 || self.context == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("vocab_size, context, n_layers and n_heads must be positive".into()));
        }
        if self.d_h() % self.n_heads != 0 {
            return Err(Error::Config(format!("d_h = {} is not divisible by {} heads", self.d_h(), self.n_heads)));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Real> {
    pub attn_norm: Tensor2D<T>,
    pub wq: Tensor2D<T>,
    pub wk: Tensor2D<T>,
    pub wv: Tensor2D<T>,
    pub wo: Tensor2D<T>,
    pub ffn_norm: Tensor2D<T>,
    pub ffn: FfnParams<T>,
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm<T: Real> {
    pub config: ModelConfig,
    pub tok_emb: Tensor2D<T>,
    pub pos_emb: Tensor2D<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Tensor2D<T>,
    pub lm_head: Tensor2D<T>,
}

/// Training graph of one batch.
pub struct LmTrace<T: Real> {
    pub tape: Tape<T>,
    /// Parameter handles in [`TransformerLm::tensors`] order.
    pub params: Vec<Var>,
    pub logits: Var,
    /// Mean next-token cross entropy.
    pub lm_loss: Var,
    /// Router outputs of each layer, `[batch·seq_len × N_e]`.
    pub routers: Vec<RouterVars>,
    pub seq_len: usize,
}

/// Result of [`TransformerLm::infer`].
#[derive(Debug, Clone)]
pub struct InferenceOutput<T: Real> {
    /// `[n × vocab]`
    pub logits: Tensor2D<T>,
    /// Router activations `A` of every layer over all rows.
    pub activations: Vec<Tensor2D<T>>,
    /// Per layer, the expert union of rows `chunk_start..n`.
    pub chunk_plans: Vec<ChunkUnionPlan>,
}

impl<T: Real> TransformerLm<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_h();
        let sd = 1.0 / (d as f64).sqrt();
        let tok_emb = Tensor2D::randn(config.vocab_size, d, 1.0, rng);
        let pos_emb = Tensor2D::randn(config.context, d, 0.1, rng);
        let blocks = (0..config.n_layers)
            .map(|_| {
                Ok(BlockParams {
                    attn_norm: Tensor2D::filled(1, d, T::one()),
                    wq: Tensor2D::randn(d, d, sd, rng),
                    wk: Tensor2D::randn(d, d, sd, rng),
                    wv: Tensor2D::randn(d, d, sd, rng),
                    wo: Tensor2D::randn(d, d, sd, rng),
                    ffn_norm: Tensor2D::filled(1, d, T::one()),
                    ffn: FfnParams::init(&config.ffn, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Tensor2D::filled(1, d, T::one()),
            lm_head: Tensor2D::randn(d, config.vocab_size, sd, rng),
        })
    }

    /// Every tensor with its stable name.
    pub fn tensors(&self) -> Vec<(String, &Tensor2D<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &b.attn_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ffn_norm", &b.ffn_norm),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
            for (name, t) in b.ffn.tensors() {
                out.push((format!("layer{l}.ffn.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in [`Self::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([&mut b.attn_norm, &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.ffn_norm]);
            out.extend(b.ffn.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against the config.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let d = c.d_h();
        let want = |t: &Tensor2D<T>, r: usize, cols: usize, what: &str| {
            if t.shape() != (r, cols) {
                Err(Error::shape("model params", format!("{what} is {:?}, expected ({r}, {cols})", t.shape())))
            } else {
                Ok(())
            }
        };
        want(&self.tok_emb, c.vocab_size, d, "tok_emb")?;
        want(&self.pos_emb, c.context, d, "pos_emb")?;
        want(&self.final_norm, 1, d, "final_norm")?;
        want(&self.lm_head, d, c.vocab_size, "lm_head")?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::shape(
                "model params",
                format!("{} blocks for {} layers", self.blocks.len(), c.n_layers),
            ));
        }
        for b in &self.blocks {
            want(&b.attn_norm, 1, d, "attn_norm")?;
            want(&b.ffn_norm, 1, d, "ffn_norm")?;
            for (t, name) in [(&b.wq, "wq"), (&b.wk, "wk"), (&b.wv, "wv"), (&b.wo, "wo")] {
                want(t, d, d, name)?;
            }
            b.ffn.check(&c.ffn)?;
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::Contract(format!("token {t} outside vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    /// Records the training forward over `inputs.len() / seq_len` sequences,
    /// with `targets[r]` the next token of row `r`.
    pub fn record(&self, inputs: &[usize], targets: &[usize], seq_len: usize) -> Result<LmTrace<T>> {
        if seq_len == 0 || seq_len > self.config.context || inputs.is_empty() || inputs.len() % seq_len != 0 {
            return Err(Error::shape("lm forward", format!("{} rows with seq_len {seq_len}", inputs.len())));
        }
        if targets.len() != inputs.len() {
            return Err(Error::shape("lm forward", "targets and inputs differ in length"));
        }
        self.check_ids(inputs)?;
        self.check_ids(targets)?;
        let mut tape = Tape::new();
        let mut params = Vec::new();
        fn leaf<T: Real>(tape: &mut Tape<T>, params: &mut Vec<Var>, t: &Tensor2D<T>) -> Var {
            let v = tape.leaf(t.clone());
            params.push(v);
            v
        }
        let tok = leaf(&mut tape, &mut params, &self.tok_emb);
        let pos = leaf(&mut tape, &mut params, &self.pos_emb);
        struct BlockVars {
            attn_norm: Var,
            wq: Var,
            wk: Var,
            wv: Var,
            wo: Var,
            ffn_norm: Var,
            ffn: FfnVars,
        }
        let mut block_vars = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let attn_norm = leaf(&mut tape, &mut params, &b.attn_norm);
            let wq = leaf(&mut tape, &mut params, &b.wq);
            let wk = leaf(&mut tape, &mut params, &b.wk);
            let wv = leaf(&mut tape, &mut params, &b.wv);
            let wo = leaf(&mut tape, &mut params, &b.wo);
            let ffn_norm = leaf(&mut tape, &mut params, &b.ffn_norm);
            let ffn = b.ffn.register(&mut tape);
            params.extend(ffn.all());
            block_vars.push(BlockVars { attn_norm, wq, wk, wv, wo, ffn_norm, ffn });
        }
        let final_norm = leaf(&mut tape, &mut params, &self.final_norm);
        let head = leaf(&mut tape, &mut params, &self.lm_head);

        let positions: Vec<usize> = (0..inputs.len()).map(|r| r % seq_len).collect();
        let te = tape.gather(tok, inputs)?;
        let pe = tape.gather(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let eps = T::lit(RMS_EPS);
        let shape = AttnShape { heads: self.config.n_heads, seq_len };
        let mut routers = Vec::with_capacity(self.blocks.len());
        for bv in &block_vars {
            let h = tape.rmsnorm_rows(x, bv.attn_norm, eps)?;
            let q = tape.matmul(h, bv.wq)?;
            let k = tape.matmul(h, bv.wk)?;
            let v = tape.matmul(h, bv.wv)?;
            let att = tape.attention(q, k, v, shape)?;
            let o = tape.matmul(att, bv.wo)?;
            x = tape.add(x, o)?;
            let h = tape.rmsnorm_rows(x, bv.ffn_norm, eps)?;
            let (y, router) = record_ffn(&mut tape, h, &bv.ffn, &self.config.ffn)?;
            routers.push(router);
            x = tape.add(x, y)?;
        }
        let h = tape.rmsnorm_rows(x, final_norm, eps)?;
        let logits = tape.matmul(h, head)?;
        let lm_loss = tape.cross_entropy(logits, targets)?;
        Ok(LmTrace { tape, params, logits, lm_loss, routers, seq_len })
    }

    /// Single-sequence forward. FFN layers run through the chunk kernel on
    /// two segments, rows `..chunk_start` and `chunk_start..`, and the
    /// second segment's union plan is returned per layer.
    pub fn infer(&self, ids: &[usize], chunk_start: usize) -> Result<InferenceOutput<T>> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Empty("infer"));
        }
        if n > self.config.context {
            return Err(Error::Contract(format!("{n} tokens exceed the context of {}", self.config.context)));
        }
        if chunk_start >= n {
            return Err(Error::Contract(format!("chunk start {chunk_start} outside {n} rows")));
        }
        self.check_ids(ids)?;
        let d = self.config.d_h();
        let eps = T::lit(RMS_EPS);
        let mut x = Tensor2D::zeros(n, d);
        for (r, &id) in ids.iter().enumerate() {
            for ((o, &t), &p) in x.row_mut(r).iter_mut().zip(self.tok_emb.row(id)).zip(self.pos_emb.row(r)) {
                *o = t + p;
            }
        }
        let shape = AttnShape { heads: self.config.n_heads, seq_len: n };
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut chunk_plans = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h, _) = ops::rmsnorm_rows(&x, b.attn_norm.data(), eps);
            let q = ops::mm(&h, &b.wq);
            let k = ops::mm(&h, &b.wk);
            let v = ops::mm(&h, &b.wv);
            let (att, _) = ops::causal_attention(&q, &k, &v, shape);
            x.add_assign(&ops::mm(&att, &b.wo));
            let (h, _) = ops::rmsnorm_rows(&x, b.ffn_norm.data(), eps);
            let acts = ffn::router_forward(&h, &b.ffn, &self.config.ffn)?;
            let mut y = Tensor2D::zeros(n, d);
            let mut plan = None;
            for (start, len) in [(0, chunk_start), (chunk_start, n - chunk_start)] {
                if len == 0 {
                    continue;
                }
                let xs = h.slice_rows(start, len);
                let a = acts.a.slice_rows(start, len);
                let p = build_union_plan(&a)?;
                let ys = if b.ffn.experts.iter().any(|e| e.gate.is_some()) {
                    ffn::mix_sparse(&xs, &a, &b.ffn)?
                } else {
                    sparse_chunk_ffn(&xs, &b.ffn, &p, &a)?
                };
                for r in 0..len {
                    y.row_mut(start + r).copy_from_slice(ys.row(r));
                }
                plan = Some(p);
            }
            x.add_assign(&y);
            activations.push(acts.a);
            chunk_plans.push(plan.expect("second segment is non-empty"));
        }
        let (h, _) = ops::rmsnorm_rows(&x, self.final_norm.data(), eps);
        let logits = ops::mm(&h, &self.lm_head);
        logits.ensure_finite("infer")?;
        Ok(InferenceOutput { logits, activations, chunk_plans })
    }

    /// Greedy next token after `ids`.
    pub fn next_token(&self, ids: &[usize]) -> Result<usize> {
        let out = self.infer(ids, ids.len() - 1)?;
        Ok(argmax(out.logits.row(ids.len() - 1)))
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig { vocab_size: 11, context: 8, n_layers: 2, n_heads: 2, ffn: FfnConfig::block_ffn(8, 4, 6) }
    }

    #[test]
    fn names_and_mutable_tensors_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = TransformerLm::<f32>::init(&toy_config(), &mut rng).unwrap();
        let shapes: Vec<_> = m.tensors().iter().map(|(_, t)| t.shape()).collect();
        let names: Vec<_> = m.tensors().iter().map(|(n, _)| n.clone()).collect();
        let mut_shapes: Vec<_> = m.tensors_mut().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        m.check().unwrap();
    }

    #[test]
    fn trace_params_follow_tensor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = TransformerLm::<f32>::init(&toy_config(), &mut rng).unwrap();
        let trace = m.record(&[1, 2, 3, 4], &[2, 3, 4, 5], 4).unwrap();
        for (v, (_, t)) in trace.params.iter().zip(m.tensors()) {
            assert_eq!(trace.tape.value(*v), t);
        }
        assert_eq!(trace.params.len(), m.tensors().len());
    }

    #[test]
    fn inference_matches_training_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TransformerLm::<f64>::init(&toy_config(), &mut rng).unwrap();
        let ids = [3, 1, 4, 1, 5, 9, 2, 6];
        let trace = m.record(&ids, &ids, 8).unwrap();
        let out = m.infer(&ids, 5).unwrap();
        assert!(trace.tape.value(trace.logits).max_abs_diff(&out.logits) < 1e-10);
    }

    #[test]
    fn prefix_rows_do_not_depend_on_suffix_or_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TransformerLm::<f32>::init(&toy_config(), &mut rng).unwrap();
        let ids = [7, 7, 2, 0, 10, 3, 3, 1];
        let full = m.infer(&ids, 0).unwrap();
        for n in 1..=ids.len() {
            for split in 0..n {
                let part = m.infer(&ids[..n], split).unwrap();
                for r in 0..n {
                    assert_eq!(part.logits.row(r), full.logits.row(r));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = TransformerLm::<f32>::init(&toy_config(), &mut rng).unwrap();
        assert!(m.infer(&[], 0).is_err());
        assert!(m.infer(&[11], 0).is_err());
        assert!(m.infer(&[0; 9], 0).is_err());
        assert!(m.record(&[1, 2, 3], &[1, 2, 3], 2).is_err());
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config = ModelConfig { n_layers: 1, ..toy_config() };
        let m = TransformerLm::<f64>::init(&config, &mut rng).unwrap();
        let inputs = [1, 5, 2, 8, 3, 3, 0, 9];
        let targets = [5, 2, 8, 3, 3, 0, 9, 4];
        let trace = m.record(&inputs, &targets, 4).unwrap();
        let grads = trace.tape.backward(trace.lm_loss);
        // Attention and output weights are smooth; the router is checked on its own.
        for name in ["tok_emb", "layer0.wq", "layer0.wv", "layer0.wo", "lm_head", "layer0.ffn.expert2.down"] {
            let idx = m.tensors().iter().position(|(n, _)| n == name).unwrap();
            let analytic = grads.wrt(trace.params[idx], m.tensors()[idx].1).data().to_vec();
            let point = m.tensors()[idx].1.data().to_vec();
            let f = |p: &[f64]| {
                let mut mm = m.clone();
                mm.tensors_mut()[idx].data_mut().copy_from_slice(p);
                let t = mm.record(&inputs, &targets, 4).unwrap();
                t.tape.value(t.lm_loss)[(0, 0)]
            };
            let check = grad_check(f, &analytic, &point, 1e-6).unwrap();
            assert!(check.max_rel_err < 1e-4, "{name}: {check:?}");
        }
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }
}
