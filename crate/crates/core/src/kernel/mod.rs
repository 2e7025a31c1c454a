//! Chunk-union inference path for verifying several tokens at once.
//!
//! For a chunk of `n` tokens the kernel collects the union of experts any
//! token activates, runs the up projection of every union expert over all
//! `n` tokens (`mid`), masks the `(token, expert)` pairs outside the
//! activation support, and accumulates the down projection over union
//! experts only. Expert weights outside the union are never read.

mod bench;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ffn::{mix_dense, FfnConfig, FfnParams};
use crate::numerics::ops::{swish, vec_mat_acc};
use crate::numerics::{Real, Tensor2D};

pub use bench::{bench_chunk_ffn, synthetic_activations, BenchConfig, BenchRow};

/// Tokens processed per block of the up projection. A block of 8 rows plus
/// one `d_h × d_e` expert slice (16 KiB at d_h = 256, d_e = 16, f32) stays
/// inside a 32 KiB L1.
pub const TOKEN_TILE: usize = 8;

/// Activated-expert union of a chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkUnionPlan {
    /// Strictly increasing expert indices.
    pub union_indices: Vec<usize>,
    /// Row-major `[n_tokens × n_experts]` activation mask.
    pub per_token_mask: Vec<bool>,
    pub n_tokens: usize,
    pub n_experts: usize,
}

impl ChunkUnionPlan {
    #[inline]
    pub fn is_active(&self, token: usize, expert: usize) -> bool {
        self.per_token_mask[token * self.n_experts + expert]
    }

    pub fn union_density(&self) -> f64 {
        self.union_indices.len() as f64 / self.n_experts as f64
    }
}

/// Builds the plan from the support of `a`.
pub fn build_union_plan<T: Real>(a: &Tensor2D<T>) -> Result<ChunkUnionPlan> {
    if a.rows() == 0 {
        return Err(Error::Empty("build_union_plan"));
    }
    let per_token_mask: Vec<bool> = a.data().iter().map(|v| *v != T::zero()).collect();
    let n_experts = a.cols();
    let union_indices = (0..n_experts).filter(|&i| (0..a.rows()).any(|k| per_token_mask[k * n_experts + i])).collect();
    Ok(ChunkUnionPlan { union_indices, per_token_mask, n_tokens: a.rows(), n_experts })
}

/// Intermediate `Swish(X · W_up)` for every union expert over all tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionMid<T: Real> {
    /// One `[n × d_e]` block per entry of the plan's union, in union order.
    pub blocks: Vec<Tensor2D<T>>,
}

fn check_nongated<T: Real>(params: &FfnParams<T>) -> Result<()> {
    if params.experts.iter().any(|e| e.gate.is_some()) {
        return Err(Error::Config("the chunk kernel supports non-gated experts only".into()));
    }
    Ok(())
}

/// Up projection over union experts (outer loop) for every token.
pub fn up_project<T: Real>(x: &Tensor2D<T>, params: &FfnParams<T>, plan: &ChunkUnionPlan) -> Result<UnionMid<T>> {
    check_nongated(params)?;
    if x.rows() != plan.n_tokens {
        return Err(Error::Contract(format!("plan covers {} tokens, input has {}", plan.n_tokens, x.rows())));
    }
    let mut blocks = Vec::with_capacity(plan.union_indices.len());
    for &i in &plan.union_indices {
        let up = &params.experts[i].up;
        if up.rows() != x.cols() {
            return Err(Error::shape("up_project", "expert rows differ from hidden size"));
        }
        let mut mid = Tensor2D::zeros(x.rows(), up.cols());
        for start in (0..x.rows()).step_by(TOKEN_TILE) {
            let end = (start + TOKEN_TILE).min(x.rows());
            for k in start..end {
                let row = mid.row_mut(k);
                vec_mat_acc(x.row(k), up, row);
                row.iter_mut().for_each(|v| *v = swish(*v));
            }
        }
        blocks.push(mid);
    }
    Ok(UnionMid { blocks })
}

/// Zeroes `mid` entries of tokens that do not activate the expert.
pub fn apply_mask<T: Real>(plan: &ChunkUnionPlan, mid: &mut UnionMid<T>) {
    for (&i, block) in plan.union_indices.iter().zip(&mut mid.blocks) {
        for k in 0..plan.n_tokens {
            if !plan.is_active(k, i) {
                block.row_mut(k).iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Down projection with union experts in the inner loop; masked pairs are
/// skipped, so their `mid` entries never reach the output.
pub fn down_project<T: Real>(
    plan: &ChunkUnionPlan,
    a: &Tensor2D<T>,
    params: &FfnParams<T>,
    mid: &UnionMid<T>,
) -> Result<Tensor2D<T>> {
    if mid.blocks.len() != plan.union_indices.len() {
        return Err(Error::Contract("mid does not match the plan's union".into()));
    }
    let d_h = params.router.rows();
    let mut y = Tensor2D::zeros(plan.n_tokens, d_h);
    let mut e = vec![T::zero(); d_h];
    for k in 0..plan.n_tokens {
        for (&i, block) in plan.union_indices.iter().zip(&mid.blocks) {
            if !plan.is_active(k, i) {
                continue;
            }
            e.iter_mut().for_each(|v| *v = T::zero());
            vec_mat_acc(block.row(k), &params.experts[i].down, &mut e);
            let w = a[(k, i)];
            for (yv, &ev) in y.row_mut(k).iter_mut().zip(&e) {
                *yv += w * ev;
            }
        }
    }
    Ok(y)
}

fn check_plan<T: Real>(plan: &ChunkUnionPlan, a: &Tensor2D<T>) -> Result<()> {
    if build_union_plan(a)? != *plan {
        return Err(Error::Contract("plan was not built from these activations".into()));
    }
    Ok(())
}

/// `Y = Σ_i A_i · E_i(X)` restricted to the chunk's expert union.
pub fn sparse_chunk_ffn<T: Real>(
    x: &Tensor2D<T>,
    params: &FfnParams<T>,
    plan: &ChunkUnionPlan,
    a: &Tensor2D<T>,
) -> Result<Tensor2D<T>> {
    check_plan(plan, a)?;
    if a.cols() != params.experts.len() {
        return Err(Error::shape("sparse_chunk_ffn", "activation columns differ from expert count"));
    }
    let mut mid = up_project(x, params, plan)?;
    apply_mask(plan, &mut mid);
    down_project(plan, a, params, &mid)
}

/// Dense reference: every expert on every token.
pub fn dense_chunk_ffn<T: Real>(x: &Tensor2D<T>, params: &FfnParams<T>, a: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    mix_dense(x, a, &params.expert_refs())
}

/// Counted memory and arithmetic of one chunk pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    pub expert_weight_bytes_touched: u64,
    pub dense_expert_weight_bytes: u64,
    pub flops_sparse: u64,
    pub flops_dense: u64,
    pub union_density: f64,
}

impl CostReport {
    pub fn bytes_ratio(&self) -> f64 {
        self.expert_weight_bytes_touched as f64 / self.dense_expert_weight_bytes as f64
    }
}

/// Counts expert-weight bytes and FLOPs. Every union expert's up and down
/// projections are counted over all `n` tokens, including the work the mask
/// later discards.
pub fn cost_accounting(plan: &ChunkUnionPlan, config: &FfnConfig, bytes_per_param: usize) -> CostReport {
    let per_expert_params = 2 * config.d_h as u64 * config.d_e as u64;
    let per_expert_bytes = per_expert_params * bytes_per_param as u64;
    let union = plan.union_indices.len() as u64;
    let n = plan.n_tokens as u64;
    let flops_per_expert = 2 * per_expert_params * n;
    CostReport {
        expert_weight_bytes_touched: union * per_expert_bytes,
        dense_expert_weight_bytes: config.n_experts as u64 * per_expert_bytes,
        flops_sparse: union * flops_per_expert,
        flops_dense: config.n_experts as u64 * flops_per_expert,
        union_density: plan.union_density(),
    }
}
