use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_union_plan, cost_accounting, dense_chunk_ffn, sparse_chunk_ffn};
use crate::error::Result;
use crate::ffn::{FfnConfig, FfnParams};
use crate::numerics::Tensor2D;

/// Shape and timing policy of a kernel benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub n_experts: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Repetitions double until one measurement spans at least this long.
    pub min_millis: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n: 32, d_h: 256, d_e: 32, n_experts: 64, warmup: 2, reps: 10, min_millis: 20, seed: 7 }
    }
}

/// One CSV row: `density,n,d_h,d_e,N_e,sparse_ns,dense_ns,bytes_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub density: f64,
    pub n: usize,
    pub d_h: usize,
    pub d_e: usize,
    #[serde(rename = "N_e")]
    pub n_e: usize,
    pub sparse_ns: f64,
    pub dense_ns: f64,
    pub bytes_ratio: f64,
}

/// Random `[n × n_experts]` activations whose union covers
/// `round(density · n_experts)` experts; each token activates each union
/// expert with probability 0.8 and every union expert is hit at least once.
pub fn synthetic_activations<R: Rng + ?Sized>(n: usize, n_experts: usize, density: f64, rng: &mut R) -> Tensor2D<f32> {
    let size = ((density * n_experts as f64).round() as usize).min(n_experts);
    let union = sample(rng, n_experts, size).into_vec();
    let mut a = Tensor2D::zeros(n, n_experts);
    for &i in &union {
        let forced = rng.gen_range(0..n);
        for k in 0..n {
            if k == forced || rng.gen_bool(0.8) {
                a[(k, i)] = rng.gen_range(0.1f32..1.5);
            }
        }
    }
    a
}

fn time_per_call(min: Duration, mut reps: usize, mut f: impl FnMut()) -> f64 {
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            f();
        }
        let elapsed = start.elapsed();
        if elapsed >= min || reps >= 1 << 20 {
            return elapsed.as_nanos() as f64 / reps as f64;
        }
        reps *= 2;
    }
}

/// Sparse versus dense wall-clock for each target union density.
pub fn bench_chunk_ffn(config: &BenchConfig, densities: &[f64]) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ffn = FfnConfig::block_ffn(config.d_h, config.d_e, config.n_experts);
    let params = FfnParams::<f32>::init(&ffn, &mut rng)?;
    let x = Tensor2D::<f32>::randn(config.n, config.d_h, 1.0, &mut rng);
    let min = Duration::from_millis(config.min_millis);
    let mut rows = Vec::with_capacity(densities.len());
    for &density in densities {
        let a = synthetic_activations(config.n, config.n_experts, density, &mut rng);
        let plan = build_union_plan(&a)?;
        for _ in 0..config.warmup {
            black_box(sparse_chunk_ffn(&x, &params, &plan, &a)?);
            black_box(dense_chunk_ffn(&x, &params, &a)?);
        }
        let reps = config.reps.max(1);
        let sparse_ns = time_per_call(min, reps, || {
            black_box(sparse_chunk_ffn(black_box(&x), &params, &plan, &a).expect("plan matches"));
        });
        let dense_ns = time_per_call(min, reps, || {
            black_box(dense_chunk_ffn(black_box(&x), &params, &a).expect("shapes match"));
        });
        let cost = cost_accounting(&plan, &ffn, std::mem::size_of::<f32>());
        rows.push(BenchRow {
            density: plan.union_density(),
            n: config.n,
            d_h: config.d_h,
            d_e: config.d_e,
            n_e: config.n_experts,
            sparse_ns,
            dense_ns,
            bytes_ratio: cost.bytes_ratio(),
        });
    }
    Ok(rows)
}
