//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Every oracle here is written against the public API only: finite
//! differences, naive dense loops and set arithmetic.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blockffn::decode::{decode_loop, greedy_decode, DraftPolicyKind, Drafter};
use blockffn::ffn::{ffn_forward, router_forward, FfnConfig, FfnParams, FfnTrace};
use blockffn::kernel::{
    apply_mask, bench_chunk_ffn, build_union_plan, cost_accounting, down_project, sparse_chunk_ffn, up_project,
    BenchConfig,
};
use blockffn::metrics::{cls, reuse_ratio, tls, union_sparsity};
use blockffn::objectives::{chunk_sparsification_with_grad, LocalityLoss, SchedulerState, BCE_CLAMP};
use blockffn::train::config::parse_matrix;
use blockffn::train::data::load_split;
use blockffn::train::{sparsity_on, Checkpoint, TrainConfig, Trainer};
use blockffn::Tensor2D;

/// Step of the fourth-order central difference used as the gradient oracle.
/// Smaller steps let cancellation in saturated `ln(1 − σ)` terms dominate.
const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
const FD_FLOOR: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
/// Minimum distance of any pre-activation from a kink (ReLU at 0, BCE clamp).
const KINK_MARGIN: f64 = 1e-3;
const KERNEL_TOL: f32 = 1e-5;
/// Float slack when comparing two metrics computed by different formulas.
const METRIC_TOL: f64 = 1e-12;
const ABLATION_GAP_TLS: f64 = 0.10;
const ABLATION_GAP_CLS8: f64 = 0.05;
const ABLATION_TLS_MATCH: f64 = 0.05;
const ABLATION_MATRIX: &str = "null,cs@1,l1@0.02,al+cs@1";

type Criterion = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ablation_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.toml");
    TrainConfig::load(&path).expect("configs/ablation.toml parses")
}

// ---------------------------------------------------------------- gradients

/// Everything the composite loss depends on, flattened for finite differences.
struct GradInstance {
    config: FfnConfig,
    x: Tensor2D<f64>,
    params: FfnParams<f64>,
    /// Fixed linear read-out of the layer output.
    readout: Tensor2D<f64>,
    chunk: usize,
    w_al: f64,
    w_cs: f64,
}

impl GradInstance {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let d_h = rng.gen_range(4..=16);
        let n_e = rng.gen_range(2..=8);
        let d_e = rng.gen_range(2..=6);
        let chunk = [2, 4][rng.gen_range(0..2)];
        let n = chunk * rng.gen_range(1..=3);
        let config = FfnConfig::block_ffn(d_h, d_e, n_e);
        let mut params = FfnParams::init(&config, rng).unwrap();
        params.router_gain = Tensor2D::uniform(1, n_e, 0.5, 1.5, rng);
        Self {
            x: Tensor2D::randn(n, d_h, 1.0, rng),
            readout: Tensor2D::randn(n, d_h, 1.0, rng),
            params,
            config,
            chunk,
            w_al: rng.gen_range(0.1..1.0),
            w_cs: rng.gen_range(0.1..1.0),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor2D<f64>> {
        let mut out = vec![&mut self.x, &mut self.params.router, &mut self.params.router_gain];
        for e in &mut self.params.experts {
            out.push(&mut e.up);
            out.push(&mut e.down);
        }
        out
    }

    fn flat(&mut self) -> Vec<f64> {
        self.tensors_mut().into_iter().flat_map(|t| t.data().to_vec()).collect()
    }

    fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    /// Forward-only value: `Σ y⊙R + w_al·AL(A⁰) + w_cs·CS(A¹)`.
    fn loss(&self) -> f64 {
        let (y, acts) = ffn_forward(&self.x, &self.params, &self.config).unwrap();
        let lin: f64 = y.data().iter().zip(self.readout.data()).map(|(a, b)| a * b).sum();
        let al = LocalityLoss::default().with_grad(&acts.a0, self.x.rows()).unwrap().0;
        let cs = chunk_sparsification_with_grad(&acts.a1, self.chunk).unwrap().0;
        lin + self.w_al * al + self.w_cs * cs
    }

    /// True when every pre-activation is away from the ReLU kink and the
    /// BCE clamp boundary.
    fn clear_of_kinks(&self) -> bool {
        let acts = router_forward(&self.x, &self.params, &self.config).unwrap();
        let alpha = LocalityLoss::default().alpha;
        let clamp_edge = ((1.0 - BCE_CLAMP) / BCE_CLAMP).ln() / alpha;
        acts.a0.data().iter().all(|&z| z.abs() > KINK_MARGIN && (z.abs() - clamp_edge).abs() > KINK_MARGIN)
    }

    /// Tape gradient in the same flat order as [`Self::flat`].
    fn analytic(&self) -> Vec<f64> {
        let trace = FfnTrace::record(&self.x, &self.params, &self.config).unwrap();
        let mut tape = trace.tape;
        let lin: f64 = tape.value(trace.y).data().iter().zip(self.readout.data()).map(|(a, b)| a * b).sum();
        let s_lin = tape.scalar_loss(trace.y, lin, self.readout.clone()).unwrap();
        let a0 = tape.value(trace.router.a0).clone();
        let (al, g_al) = LocalityLoss::default().with_grad(&a0, a0.rows()).unwrap();
        let s_al = tape.scalar_loss(trace.router.a0, al, g_al).unwrap();
        let a1 = tape.value(trace.router.a1).clone();
        let (cs, g_cs) = chunk_sparsification_with_grad(&a1, self.chunk).unwrap();
        let s_cs = tape.scalar_loss(trace.router.a1, cs, g_cs).unwrap();
        let total = tape.weighted_sum(&[(s_lin, 1.0), (s_al, self.w_al), (s_cs, self.w_cs)]).unwrap();
        let grads = tape.backward(total);
        let mut vars = vec![trace.x, trace.vars.router, trace.vars.gain];
        for e in &trace.vars.experts {
            vars.push(e.up);
            vars.push(e.down);
        }
        vars.iter().flat_map(|&v| grads.wrt(v, tape.value(v)).data().to_vec()).collect()
    }
}

fn gradient_correctness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut checked, mut rejected, mut worst, mut coords) = (0, 0, 0.0f64, 0usize);
    while checked < 50 {
        let mut inst = GradInstance::sample(&mut rng);
        if !inst.clear_of_kinks() {
            rejected += 1;
            continue;
        }
        let analytic = inst.analytic();
        let point = inst.flat();
        ensure(analytic.len() == point.len(), || "gradient length mismatch".into())?;
        let mut v = point.clone();
        let mut at = |i: usize, offset: f64, v: &mut Vec<f64>| {
            v[i] = point[i] + offset;
            inst.set_flat(v);
            let f = inst.loss();
            v[i] = point[i];
            f
        };
        for i in 0..point.len() {
            let h = FD_STEP;
            let numeric = (8.0 * (at(i, h, &mut v) - at(i, -h, &mut v))
                - (at(i, 2.0 * h, &mut v) - at(i, -2.0 * h, &mut v)))
                / (12.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
        inst.set_flat(&point);
        coords += point.len();
        checked += 1;
    }
    ensure(worst < GRAD_TOL, || format!("max rel err {worst:.3e} >= {GRAD_TOL:e}"))?;
    Ok(format!("50 instances, {coords} coordinates, max rel err {worst:.2e} ({rejected} kink draws resampled)"))
}

// ------------------------------------------------------------------- kernel

/// `[n × N_e]` activations whose union covers `round(density · N_e)` experts;
/// each token activates each union expert with probability one half.
fn random_chunk(rng: &mut ChaCha8Rng, n: usize, n_e: usize, density: f64) -> Tensor2D<f32> {
    let size = ((density * n_e as f64).round() as usize).clamp(1, n_e);
    let mut a = Tensor2D::zeros(n, n_e);
    for i in sample(rng, n_e, size).into_vec() {
        let forced = rng.gen_range(0..n);
        for k in 0..n {
            if k == forced || rng.gen_bool(0.5) {
                a[(k, i)] = rng.gen_range(0.05f32..1.5);
            }
        }
    }
    a
}

/// Every expert on every token, accumulated in ascending expert order.
fn dense_oracle(x: &Tensor2D<f32>, params: &FfnParams<f32>, a: &Tensor2D<f32>) -> Tensor2D<f32> {
    let (n, d_h) = x.shape();
    let mut y = Tensor2D::zeros(n, d_h);
    for k in 0..n {
        for (i, e) in params.experts.iter().enumerate() {
            let d_e = e.up.cols();
            let mid: Vec<f32> = (0..d_e)
                .map(|j| {
                    let z: f32 = (0..d_h).map(|c| x[(k, c)] * e.up[(c, j)]).sum();
                    z / (1.0 + (-z).exp())
                })
                .collect();
            for c in 0..d_h {
                let out: f32 = (0..d_e).map(|j| mid[j] * e.down[(j, c)]).sum();
                y[(k, c)] += a[(k, i)] * out;
            }
        }
    }
    y
}

fn kernel_chunks() -> Vec<Tensor2D<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    (0..1000)
        .map(|_| {
            let density = rng.gen_range(0.05..=0.95);
            random_chunk(&mut rng, 32, 64, density)
        })
        .collect()
}

fn kernel_equivalence() -> Result<String, String> {
    let config = FfnConfig::block_ffn(64, 16, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    let mut params = FfnParams::<f32>::init(&config, &mut rng).unwrap();
    let mut x = Tensor2D::zeros(0, 0);
    let (mut worst, mut lo, mut hi) = (0.0f32, 1.0f64, 0.0f64);
    for (c, a) in kernel_chunks().iter().enumerate() {
        if c % 50 == 0 {
            params = FfnParams::init(&config, &mut rng).unwrap();
            x = Tensor2D::randn(32, 64, 1.0, &mut rng);
        }
        let plan = build_union_plan(a).unwrap();
        lo = lo.min(plan.union_density());
        hi = hi.max(plan.union_density());
        let sparse = sparse_chunk_ffn(&x, &params, &plan, a).unwrap();
        let dense = dense_oracle(&x, &params, a);
        for (s, d) in sparse.data().iter().zip(dense.data()) {
            worst = worst.max((s - d).abs());
        }

        let mut mid = up_project(&x, &params, &plan).unwrap();
        apply_mask(&plan, &mut mid);
        let clean = down_project(&plan, a, &params, &mid).unwrap();
        for (u, &i) in plan.union_indices.iter().enumerate() {
            for k in 0..plan.n_tokens {
                if !plan.is_active(k, i) {
                    let junk = if (k + u) % 2 == 0 { f32::NAN } else { 1e30 };
                    mid.blocks[u].row_mut(k).iter_mut().for_each(|v| *v = junk);
                }
            }
        }
        let dirty = down_project(&plan, a, &params, &mid).unwrap();
        let same = |p: &Tensor2D<f32>, q: &Tensor2D<f32>| {
            p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        };
        ensure(same(&clean, &dirty), || format!("chunk {c}: masked mid entries reached the output"))?;
        ensure(same(&clean, &sparse), || format!("chunk {c}: staged kernel differs from sparse_chunk_ffn"))?;
    }
    ensure(worst <= KERNEL_TOL, || format!("max |sparse − dense| = {worst:e} > {KERNEL_TOL:e}"))?;
    Ok(format!("1000 chunks, union density {lo:.2}..{hi:.2}, max abs diff {worst:.2e}, masking bit-exact"))
}

// ----------------------------------------------------------------- counting

fn counting_exactness() -> Result<String, String> {
    let mut plans: Vec<_> = kernel_chunks().iter().map(|a| build_union_plan(a).unwrap()).collect();
    plans.push(build_union_plan(&Tensor2D::<f32>::zeros(32, 64)).unwrap());
    plans.push(build_union_plan(&Tensor2D::<f32>::filled(32, 64, 1.0)).unwrap());
    let config = FfnConfig::block_ffn(64, 16, 64);
    for (p, plan) in plans.iter().enumerate() {
        let u = plan.union_indices.len();
        for bytes in [2, 4, 8] {
            let cost = cost_accounting(plan, &config, bytes);
            ensure(cost.expert_weight_bytes_touched * 64 == u as u64 * cost.dense_expert_weight_bytes, || {
                format!("plan {p}: byte counts are not proportional to the union")
            })?;
            ensure(cost.bytes_ratio() == u as f64 / 64.0, || {
                format!("plan {p}: ratio {} != {u}/64", cost.bytes_ratio())
            })?;
        }
    }
    let bench = BenchConfig { reps: 20, min_millis: 50, ..BenchConfig::default() };
    let rows = bench_chunk_ffn(&bench, &[0.05, 0.125, 0.25]).map_err(|e| e.to_string())?;
    for r in &rows {
        ensure(r.sparse_ns < r.dense_ns, || {
            format!("bench at density {:.3}: sparse {:.0} ns >= dense {:.0} ns", r.density, r.sparse_ns, r.dense_ns)
        })?;
    }
    let speedups: Vec<String> =
        rows.iter().map(|r| format!("{:.2}:{:.1}x", r.density, r.dense_ns / r.sparse_ns)).collect();
    Ok(format!("{} plans exact at 2/4/8 bytes per weight; dense/sparse time {}", plans.len(), speedups.join(" ")))
}

// ------------------------------------------------------------------ metrics

fn active_sets(a: &Tensor2D<f64>) -> Vec<BTreeSet<usize>> {
    (0..a.rows()).map(|r| (0..a.cols()).filter(|&i| a[(r, i)] > 0.0).collect()).collect()
}

fn metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let lens = [1, 2, 4, 8, 16];
    for m in 0..1000 {
        let n = 16 * rng.gen_range(1..=4);
        let n_e = rng.gen_range(1..=32);
        let p: f64 = rng.gen_range(0.0..=1.0);
        let mut a = Tensor2D::<f64>::zeros(n, n_e);
        for v in a.data_mut() {
            if rng.gen_bool(p) {
                *v = rng.gen_range(0.01..2.0);
            }
        }
        let sets = active_sets(&a);
        let all: BTreeSet<usize> = (0..n_e).collect();
        let frac_inactive = |s: &BTreeSet<usize>| all.difference(s).count() as f64 / n_e as f64;
        let close = |x: f64, y: f64| (x - y).abs() <= METRIC_TOL;

        let want_tls = sets.iter().map(frac_inactive).sum::<f64>() / n as f64;
        let got_tls = tls(&a, 0.0).unwrap();
        ensure(close(got_tls, want_tls), || format!("mask {m}: tls {got_tls} vs oracle {want_tls}"))?;

        let mut curve = Vec::new();
        for &l in &lens {
            let chunks: Vec<BTreeSet<usize>> =
                sets.chunks_exact(l).map(|c| c.iter().flatten().copied().collect()).collect();
            let want = chunks.iter().map(frac_inactive).sum::<f64>() / chunks.len() as f64;
            let got = cls(&a, l, 0.0).unwrap();
            ensure(close(got, want), || format!("mask {m}: cls_{l} {got} vs oracle {want}"))?;
            curve.push(got);
        }
        ensure(close(curve[0], got_tls), || format!("mask {m}: cls_1 {} != tls {got_tls}", curve[0]))?;
        ensure(curve.windows(2).all(|w| w[1] <= w[0] + METRIC_TOL), || format!("mask {m}: curve {curve:?} rises"))?;

        let ratios: Vec<f64> = sets
            .windows(2)
            .filter(|w| !w[0].is_empty())
            .map(|w| w[0].intersection(&w[1]).count() as f64 / w[0].len() as f64)
            .collect();
        let want_reuse = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
        let got_reuse = reuse_ratio(&a, 0.0).unwrap();
        let reuse_ok = match (got_reuse, want_reuse) {
            (Some(g), Some(w)) => close(g, w),
            (None, None) => true,
            _ => false,
        };
        ensure(reuse_ok, || format!("mask {m}: reuse {got_reuse:?} vs oracle {want_reuse:?}"))?;

        let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
        let want_union = 1.0 - union.len() as f64 / n_e as f64;
        let got_union = union_sparsity(&a, 0.0).unwrap();
        ensure(close(got_union, want_union), || format!("mask {m}: union {got_union} vs oracle {want_union}"))?;
    }
    Ok(format!("1000 masks, chunk lengths {lens:?}, tolerance {METRIC_TOL:e}"))
}

// ---------------------------------------------------------------- scheduler

fn feed(s: &mut SchedulerState, loss: f64, steps: usize) {
    for _ in 0..steps {
        s.observe(loss).unwrap();
    }
}

/// Window mean as a straight-line replay computes it.
fn window_mean(loss: f64, n: usize) -> f64 {
    let mut sum = 0.0;
    for _ in 0..n {
        sum += loss;
    }
    sum / n as f64
}

fn scheduler_conformance() -> Result<String, String> {
    let (n_st, n_adj, gamma_min, lambda0) = (1000, 100, 1.025, 5e-2);
    let mut s = SchedulerState::new(lambda0, n_st, n_adj, gamma_min).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..n_st - n_adj {
        s.observe(rng.gen_range(0.0..3.0)).unwrap();
        ensure(s.lambda == lambda0, || format!("λ moved to {} during warm-up step {}", s.lambda, s.step))?;
    }
    feed(&mut s, 0.5, n_adj);
    ensure(s.step == n_st && s.lambda == lambda0, || format!("λ = {} at step {}", s.lambda, s.step))?;

    // Falling loss: γ = 0.4 / 0.5 scales λ down by γ.
    feed(&mut s, 0.4, n_adj - 1);
    ensure(s.lambda == lambda0, || "λ changed before the window closed".into())?;
    feed(&mut s, 0.4, 1);
    let gamma = window_mean(0.4, n_adj) / window_mean(0.5, n_adj);
    let mut want = lambda0 * gamma;
    ensure(s.lambda == want, || format!("falling case: λ = {} expected {want}", s.lambda))?;
    ensure((gamma - 0.8).abs() < 1e-12, || format!("falling case: γ = {gamma}"))?;

    // Rising by less than γ_min: the floor applies.
    feed(&mut s, 0.404, n_adj);
    let gamma = window_mean(0.404, n_adj) / window_mean(0.4, n_adj);
    ensure((gamma - 1.01).abs() < 1e-12, || format!("rising case: γ = {gamma}"))?;
    want *= gamma_min;
    ensure(s.lambda == want, || format!("rising case: λ = {} expected {want}", s.lambda))?;

    // Rising by more than γ_min: γ itself applies.
    feed(&mut s, 0.5, n_adj);
    let gamma = window_mean(0.5, n_adj) / window_mean(0.404, n_adj);
    want *= gamma;
    ensure(s.lambda == want, || format!("steep case: λ = {} expected {want}", s.lambda))?;

    // A zero previous window holds λ.
    let mut z = SchedulerState::new(lambda0, n_st, n_adj, gamma_min).unwrap();
    feed(&mut z, 0.0, n_st);
    feed(&mut z, 0.3, n_adj);
    ensure(z.lambda == lambda0, || format!("zero previous window moved λ to {}", z.lambda))?;
    Ok(format!("N_st {n_st}, N_adj {n_adj}, γ_min {gamma_min}: warm-up hold, ×0.8, ×1.025, ×γ, zero-window hold"))
}

// ----------------------------------------------------------------- ablation

fn ablation_direction() -> Result<String, String> {
    let base = ablation_config();
    let data = load_split(&base.data).map_err(|e| e.to_string())?;
    let arms = parse_matrix(ABLATION_MATRIX).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for arm in &arms {
        let config = base.with_arm(arm);
        let mut trainer = Trainer::with_data(&config, data.clone()).map_err(|e| e.to_string())?;
        trainer.run(None).map_err(|e| format!("{}: {e}", arm.kind.name()))?;
        let s =
            sparsity_on(&trainer.model, &data.heldout, config.data.seq_len, &[8], 256).map_err(|e| e.to_string())?;
        rows.push((arm.kind.name(), s.tls, s.cls[&8], s.reuse_ratio.unwrap_or(0.0)));
    }
    let get = |name: &str| rows.iter().find(|r| r.0 == name).cloned().ok_or(format!("arm {name} missing"));
    let (null, al_cs, l1) = (get("null")?, get("al+cs")?, get("l1")?);
    let table: Vec<String> =
        rows.iter().map(|r| format!("{} tls {:.3} cls8 {:.3} reuse {:.3}", r.0, r.1, r.2, r.3)).collect();
    let table = table.join("; ");
    let next_lowest = rows.iter().filter(|r| r.0 != null.0).map(|r| r.1).fold(f64::INFINITY, f64::min);
    ensure(next_lowest - null.1 >= ABLATION_GAP_TLS, || format!("null TLS is not lowest by 10 points: {table}"))?;
    ensure((al_cs.1 - l1.1).abs() <= ABLATION_TLS_MATCH, || format!("TLS of al+cs and l1 not matched: {table}"))?;
    ensure(al_cs.2 - l1.2 >= ABLATION_GAP_CLS8, || format!("al+cs CLS_8 does not beat l1 by 5 points: {table}"))?;
    ensure(al_cs.3 > null.3, || format!("al+cs reuse does not exceed null: {table}"))?;
    Ok(table)
}

// ------------------------------------------------------------- speculative

fn speculative_losslessness() -> Result<String, String> {
    let mut config = ablation_config();
    config.data.steps = 300;
    config.objective.lambda0 = 1.0;
    let mut trainer = Trainer::new(&config).map_err(|e| e.to_string())?;
    trainer.run(None).map_err(|e| e.to_string())?;
    let model = &trainer.model;
    let corpus = &trainer.data.train;
    let heldout = &trainer.data.heldout;
    let (n, max_tokens) = (4, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut runs = 0;
    let mut self_means = Vec::new();
    for p in 0..20 {
        let len = rng.gen_range(4..=20);
        let start = rng.gen_range(0..heldout.len() - len);
        let prompt = &heldout[start..start + len];
        let greedy = greedy_decode(model, prompt, max_tokens).map_err(|e| e.to_string())?;
        for kind in DraftPolicyKind::ALL {
            let mut drafter = Drafter::new(kind, corpus, 4, p).map_err(|e| e.to_string())?;
            let out = decode_loop(model, &mut drafter, prompt, max_tokens, n).map_err(|e| e.to_string())?;
            ensure(out.tokens == greedy, || format!("prompt {p}, {}: output differs from greedy", kind.name()))?;
            runs += 1;
            if kind != DraftPolicyKind::SelfGreedy {
                continue;
            }
            let st = &out.stats;
            let mean = st.mean_accepted().unwrap_or(0.0);
            ensure(mean == n as f64, || format!("prompt {p}: self_greedy mean accepted {mean} != {n}"))?;
            self_means.push(mean);
            let density = st.counted_ffn_bytes as f64 / st.counted_ffn_bytes_dense_equivalent as f64;
            let per_token = st.bytes_per_token().unwrap_or(f64::INFINITY);
            if density < 1.0 {
                ensure(per_token < st.dense_ar_bytes_per_token as f64, || {
                    format!("prompt {p}: {per_token:.0} bytes/token >= dense {}", st.dense_ar_bytes_per_token)
                })?;
            }
        }
    }
    Ok(format!("{runs} decodes token-identical to greedy; self_greedy accepted {n} on every step"))
}

// ------------------------------------------------------------- determinism

fn determinism_and_persistence() -> Result<String, String> {
    let mut config = ablation_config();
    config.data.steps = 60;
    config.data.log_every = 10;
    config.data.checkpoint_every = 30;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        Trainer::new(&config).and_then(|mut t| t.run(Some(d.path()))).map_err(|e| e.to_string())?;
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    for f in ["metrics.csv", "step30.bffn", "final.bffn"] {
        ensure(read(&dirs[0], f) == read(&dirs[1], f), || format!("{f} differs between seeded runs"))?;
    }
    let original = read(&dirs[0], "final.bffn");
    let loaded = Checkpoint::load(&dirs[0].path().join("final.bffn")).map_err(|e| e.to_string())?;
    let again = dirs[1].path().join("resaved.bffn");
    loaded.save(&again).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&again).unwrap() == original, || "save/load/save changed the checkpoint bytes".into())?;
    let rows = read(&dirs[0], "metrics.csv").iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("{rows} log rows and 3 checkpoints identical; {} byte checkpoint round-trips", original.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 8] = [
        ("gradient_correctness", gradient_correctness),
        ("kernel_equivalence", kernel_equivalence),
        ("counting_exactness", counting_exactness),
        ("metric_oracles", metric_oracles),
        ("scheduler_conformance", scheduler_conformance),
        ("ablation_direction", ablation_direction),
        ("speculative_losslessness", speculative_losslessness),
        ("determinism_and_persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {reason}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
