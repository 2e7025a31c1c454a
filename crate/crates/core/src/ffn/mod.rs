//! The sparse FFN layer: router zoo, experts, and the unified mixture
//! `FFN(x) = Σ_i A_i(x) · E_i(x)`.
//!
//! The default router is ReLU followed by a per-expert-gain RMSNorm, which
//! separates the activation pattern (ReLU support) from the activation
//! magnitudes. The softmax/sigmoid Top-K, Top-P and plain ReLU routers are
//! kept as baselines.

pub mod moe;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, Elementwise};
use crate::numerics::tape::Tape;
use crate::numerics::{Real, Tensor2D, Var, RMS_EPS};

pub use moe::{expert_output, mix_dense, ExpertRef, ExpertVars};

/// How activation values are produced from router logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// `RMSNorm(ReLU(x · W))`.
    ReluRmsnorm,
    /// `ReLU(x · W)` without normalization.
    ReluPlain,
    /// `TopK(Softmax(x · W))`.
    TopkSoftmax,
    /// Shared experts always on, then `TopK(Softmax(x · W))` over the rest.
    SharedTopkSoftmax,
    /// Shared experts always on, then `Norm(TopK(Sigmoid(x · W)))`.
    SigmoidNormTopk,
    /// Smallest descending prefix of `Softmax(x · W)` whose mass reaches `p`.
    ToppSoftmax,
}

impl RouterKind {
    pub fn is_relu(self) -> bool {
        matches!(self, RouterKind::ReluRmsnorm | RouterKind::ReluPlain)
    }

    fn uses_k(self) -> bool {
        matches!(self, RouterKind::TopkSoftmax | RouterKind::SharedTopkSoftmax | RouterKind::SigmoidNormTopk)
    }

    fn allows_shared(self) -> bool {
        matches!(self, RouterKind::SharedTopkSoftmax | RouterKind::SigmoidNormTopk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// `W_downᵀ · Swish(W_upᵀ x)`.
    NongatedSwish,
    /// `W_downᵀ · (Swish(W_gateᵀ x) ⊙ W_upᵀ x)`.
    GatedSwish,
}

fn default_eps() -> f64 {
    RMS_EPS
}

fn default_k() -> usize {
    2
}

fn default_p() -> f64 {
    0.5
}

/// Layer geometry and routing choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfnConfig {
    pub d_h: usize,
    pub d_e: usize,
    pub n_experts: usize,
    #[serde(default)]
    pub n_shared: usize,
    pub router: RouterKind,
    pub expert: ExpertKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl FfnConfig {
    pub fn block_ffn(d_h: usize, d_e: usize, n_experts: usize) -> Self {
        Self {
            d_h,
            d_e,
            n_experts,
            n_shared: 0,
            router: RouterKind::ReluRmsnorm,
            expert: ExpertKind::NongatedSwish,
            k: default_k(),
            p: default_p(),
            eps: RMS_EPS,
        }
    }

    /// Number of experts with a router column.
    pub fn n_routed(&self) -> usize {
        self.n_experts - self.n_shared
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_h == 0 || self.d_e == 0 || self.n_experts == 0 {
            return bad("d_h, d_e and n_experts must be positive".into());
        }
        if self.n_shared >= self.n_experts {
            return bad(format!("n_shared {} must be below n_experts {}", self.n_shared, self.n_experts));
        }
        if self.n_shared > 0 && !self.router.allows_shared() {
            return bad(format!("router {:?} does not support shared experts", self.router));
        }
        if self.router.uses_k() && (self.k == 0 || self.k > self.n_routed()) {
            return bad(format!("k = {} outside 1..={}", self.k, self.n_routed()));
        }
        if self.router == RouterKind::ToppSoftmax && !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p = {} outside (0, 1]", self.p));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        Ok(())
    }
}

/// Weights of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T: Real> {
    /// `[d_h × d_e]`
    pub up: Tensor2D<T>,
    /// `[d_e × d_h]`
    pub down: Tensor2D<T>,
    /// `[d_h × d_e]`, gated experts only.
    pub gate: Option<Tensor2D<T>>,
}

impl<T: Real> ExpertParams<T> {
    pub fn as_ref(&self) -> ExpertRef<'_, T> {
        ExpertRef { up: &self.up, down: &self.down, gate: self.gate.as_ref() }
    }
}

/// All learnable weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T: Real> {
    /// `[d_h × n_routed]`
    pub router: Tensor2D<T>,
    /// `[1 × n_experts]`; only read by the ReLU+RMSNorm router.
    pub router_gain: Tensor2D<T>,
    pub experts: Vec<ExpertParams<T>>,
}

impl<T: Real> FfnParams<T> {
    /// Fan-in scaled normal initialization with unit gains.
    pub fn init<R: Rng + ?Sized>(config: &FfnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d_h, d_e) = (config.d_h, config.d_e);
        let sd_h = 1.0 / (d_h as f64).sqrt();
        let sd_e = 1.0 / (d_e as f64).sqrt();
        let router = Tensor2D::randn(d_h, config.n_routed(), sd_h, rng);
        let experts = (0..config.n_experts)
            .map(|_| {
                let up = Tensor2D::randn(d_h, d_e, sd_h, rng);
                let down = Tensor2D::randn(d_e, d_h, sd_e, rng);
                let gate = moe::expects_gate(config.expert).then(|| Tensor2D::randn(d_h, d_e, sd_h, rng));
                ExpertParams { up, down, gate }
            })
            .collect();
        Ok(Self { router, router_gain: Tensor2D::filled(1, config.n_experts, T::one()), experts })
    }

    pub fn check(&self, config: &FfnConfig) -> Result<()> {
        config.validate()?;
        let want = |t: &Tensor2D<T>, r: usize, c: usize, what: &str| {
            if t.shape() != (r, c) {
                Err(Error::shape("ffn params", format!("{what} is {:?}, expected ({r}, {c})", t.shape())))
            } else {
                Ok(())
            }
        };
        want(&self.router, config.d_h, config.n_routed(), "router")?;
        want(&self.router_gain, 1, config.n_experts, "router_gain")?;
        if self.experts.len() != config.n_experts {
            return Err(Error::shape("ffn params", format!("{} experts", self.experts.len())));
        }
        for e in &self.experts {
            want(&e.up, config.d_h, config.d_e, "up")?;
            want(&e.down, config.d_e, config.d_h, "down")?;
            match (&e.gate, moe::expects_gate(config.expert)) {
                (Some(g), true) => want(g, config.d_h, config.d_e, "gate")?,
                (None, false) => {}
                _ => return Err(Error::shape("ffn params", "gate presence does not match expert kind")),
            }
        }
        Ok(())
    }

    pub fn expert_refs(&self) -> Vec<ExpertRef<'_, T>> {
        self.experts.iter().map(ExpertParams::as_ref).collect()
    }

    /// Places every weight on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> FfnVars {
        let router = tape.leaf(self.router.clone());
        let gain = tape.leaf(self.router_gain.clone());
        let experts = self
            .experts
            .iter()
            .map(|e| ExpertVars {
                up: tape.leaf(e.up.clone()),
                down: tape.leaf(e.down.clone()),
                gate: e.gate.as_ref().map(|g| tape.leaf(g.clone())),
            })
            .collect();
        FfnVars { router, gain, experts }
    }

    /// Visits every tensor with a stable name suffix.
    pub fn tensors(&self) -> Vec<(String, &Tensor2D<T>)> {
        let mut out = vec![("router".to_string(), &self.router), ("router_gain".to_string(), &self.router_gain)];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("expert{i}.up"), &e.up));
            out.push((format!("expert{i}.down"), &e.down));
            if let Some(g) = &e.gate {
                out.push((format!("expert{i}.gate"), g));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D<T>> {
        let mut out = vec![&mut self.router, &mut self.router_gain];
        for e in &mut self.experts {
            out.push(&mut e.up);
            out.push(&mut e.down);
            if let Some(g) = &mut e.gate {
                out.push(g);
            }
        }
        out
    }
}

/// Tape handles of a layer's weights.
#[derive(Debug, Clone)]
pub struct FfnVars {
    pub router: Var,
    pub gain: Var,
    pub experts: Vec<ExpertVars>,
}

impl FfnVars {
    /// Handles in the same order as [`FfnParams::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.router, self.gain];
        for e in &self.experts {
            out.push(e.up);
            out.push(e.down);
            if let Some(g) = e.gate {
                out.push(g);
            }
        }
        out
    }
}

/// Router outputs for a chunk of tokens, each `[n × n_experts]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterActivations<T: Real> {
    /// Pre-activation logits.
    pub a0: Tensor2D<T>,
    /// Post-nonlinearity pattern (ReLU output, or routing probabilities).
    pub a1: Tensor2D<T>,
    /// Final activation values weighting the experts.
    pub a: Tensor2D<T>,
}

/// Tape handles of the router outputs.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub a0: Var,
    pub a1: Var,
    pub a: Var,
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub(crate) fn top_k_mask<T: Real>(row: &[T], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut mask = vec![false; row.len()];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Smallest descending prefix whose mass reaches `p`, including the entry
/// that crosses the threshold.
pub(crate) fn top_p_mask<T: Real>(row: &[T], p: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut mask = vec![false; row.len()];
    let mut mass = 0.0;
    for &i in &idx {
        mask[i] = true;
        mass += row[i].f64();
        if mass >= p {
            break;
        }
    }
    mask
}

fn row_masks<T: Real>(t: &Tensor2D<T>, f: impl Fn(&[T]) -> Vec<bool>) -> Vec<bool> {
    (0..t.rows()).flat_map(|r| f(t.row(r))).collect()
}

/// Records the router on `tape`.
pub fn record_router<T: Real>(tape: &mut Tape<T>, x: Var, vars: &FfnVars, config: &FfnConfig) -> Result<RouterVars> {
    let logits = tape.matmul(x, vars.router)?;
    let shared = config.n_shared;
    let pad = |tape: &mut Tape<T>, v: Var| if shared > 0 { tape.pad_cols(v, shared, T::one()) } else { v };
    let out = match config.router {
        RouterKind::ReluRmsnorm => {
            let a1 = tape.unary(logits, Elementwise::Relu);
            let a = tape.rmsnorm_rows(a1, vars.gain, T::lit(config.eps))?;
            RouterVars { a0: logits, a1, a }
        }
        RouterKind::ReluPlain => {
            let a1 = tape.unary(logits, Elementwise::Relu);
            RouterVars { a0: logits, a1, a: a1 }
        }
        RouterKind::TopkSoftmax | RouterKind::SharedTopkSoftmax => {
            let probs = tape.softmax_rows(logits);
            let mask = row_masks(tape.value(probs), |r| top_k_mask(r, config.k));
            let sel = tape.select(probs, mask);
            RouterVars { a0: pad(tape, logits), a1: pad(tape, probs), a: pad(tape, sel) }
        }
        RouterKind::SigmoidNormTopk => {
            let scores = tape.unary(logits, Elementwise::Sigmoid);
            let mask = row_masks(tape.value(scores), |r| top_k_mask(r, config.k));
            let sel = tape.select(scores, mask);
            let norm = tape.normalize_rows(sel);
            RouterVars { a0: pad(tape, logits), a1: pad(tape, scores), a: pad(tape, norm) }
        }
        RouterKind::ToppSoftmax => {
            let probs = tape.softmax_rows(logits);
            let mask = row_masks(tape.value(probs), |r| top_p_mask(r, config.p));
            let sel = tape.select(probs, mask);
            RouterVars { a0: logits, a1: probs, a: sel }
        }
    };
    Ok(out)
}

/// Records router plus mixture on `tape`; returns the layer output.
pub fn record_ffn<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &FfnVars,
    config: &FfnConfig,
) -> Result<(Var, RouterVars)> {
    let router = record_router(tape, x, vars, config)?;
    let y = moe::record_moe(tape, x, router.a, &vars.experts)?;
    Ok((y, router))
}

fn check_input<T: Real>(x: &Tensor2D<T>, config: &FfnConfig) -> Result<()> {
    if x.cols() != config.d_h {
        return Err(Error::shape("ffn", format!("input has {} columns, d_h = {}", x.cols(), config.d_h)));
    }
    Ok(())
}

/// Router activations for every row of `x`.
pub fn router_forward<T: Real>(
    x: &Tensor2D<T>,
    params: &FfnParams<T>,
    config: &FfnConfig,
) -> Result<RouterActivations<T>> {
    check_input(x, config)?;
    params.check(config)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let router = tape.leaf(params.router.clone());
    let gain = tape.leaf(params.router_gain.clone());
    let vars = FfnVars { router, gain, experts: Vec::new() };
    let r = record_router(&mut tape, xv, &vars, config)?;
    Ok(RouterActivations { a0: tape.value(r.a0).clone(), a1: tape.value(r.a1).clone(), a: tape.value(r.a).clone() })
}

/// One expert applied to every row of `x`.
pub fn expert_forward<T: Real>(x: &Tensor2D<T>, expert: &ExpertParams<T>, config: &FfnConfig) -> Result<Tensor2D<T>> {
    check_input(x, config)?;
    if expert.gate.is_some() != moe::expects_gate(config.expert) {
        return Err(Error::Config("gate presence does not match expert kind".into()));
    }
    Ok(expert_output(x, expert.as_ref()))
}

/// Full layer forward; experts with zero activation contribute nothing and
/// are never evaluated.
pub fn ffn_forward<T: Real>(
    x: &Tensor2D<T>,
    params: &FfnParams<T>,
    config: &FfnConfig,
) -> Result<(Tensor2D<T>, RouterActivations<T>)> {
    let acts = router_forward(x, params, config)?;
    let (y, _) = moe::mix_forward(x, &acts.a, &params.expert_refs())?;
    Ok((y, acts))
}

/// Layer forward that evaluates every expert on every token.
pub fn ffn_forward_dense<T: Real>(
    x: &Tensor2D<T>,
    params: &FfnParams<T>,
    config: &FfnConfig,
) -> Result<(Tensor2D<T>, RouterActivations<T>)> {
    let acts = router_forward(x, params, config)?;
    let y = mix_dense(x, &acts.a, &params.expert_refs())?;
    Ok((y, acts))
}

/// Sparse mixture for precomputed activations `a`.
pub fn mix_sparse<T: Real>(x: &Tensor2D<T>, a: &Tensor2D<T>, params: &FfnParams<T>) -> Result<Tensor2D<T>> {
    Ok(moe::mix_forward(x, a, &params.expert_refs())?.0)
}

/// Gradients of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads<T: Real> {
    pub up: Tensor2D<T>,
    pub down: Tensor2D<T>,
    pub gate: Option<Tensor2D<T>>,
}

/// Gradients of a layer's inputs and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnGrads<T: Real> {
    pub x: Tensor2D<T>,
    pub router: Tensor2D<T>,
    pub router_gain: Tensor2D<T>,
    pub experts: Vec<ExpertGrads<T>>,
}

/// A recorded layer forward, ready for backward.
pub struct FfnTrace<T: Real> {
    pub tape: Tape<T>,
    pub x: Var,
    pub vars: FfnVars,
    pub y: Var,
    pub router: RouterVars,
}

impl<T: Real> FfnTrace<T> {
    pub fn record(x: &Tensor2D<T>, params: &FfnParams<T>, config: &FfnConfig) -> Result<Self> {
        check_input(x, config)?;
        params.check(config)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = params.register(&mut tape);
        let (y, router) = record_ffn(&mut tape, xv, &vars, config)?;
        Ok(Self { tape, x: xv, vars, y, router })
    }

    pub fn output(&self) -> &Tensor2D<T> {
        self.tape.value(self.y)
    }

    /// Backpropagates `upstream = ∂L/∂y`.
    pub fn backward(&self, upstream: &Tensor2D<T>) -> Result<FfnGrads<T>> {
        if upstream.shape() != self.output().shape() {
            return Err(Error::shape("ffn_backward", "upstream shape differs from output"));
        }
        let grads = self.tape.backward_from(self.y, upstream.clone());
        let g = |v: Var| grads.wrt(v, self.tape.value(v));
        Ok(FfnGrads {
            x: g(self.x),
            router: g(self.vars.router),
            router_gain: g(self.vars.gain),
            experts: self
                .vars
                .experts
                .iter()
                .map(|e| ExpertGrads { up: g(e.up), down: g(e.down), gate: e.gate.map(g) })
                .collect(),
        })
    }
}

/// Convenience for [`FfnTrace::record`] followed by [`FfnTrace::backward`].
pub fn ffn_backward<T: Real>(
    x: &Tensor2D<T>,
    params: &FfnParams<T>,
    config: &FfnConfig,
    upstream: &Tensor2D<T>,
) -> Result<FfnGrads<T>> {
    FfnTrace::record(x, params, config)?.backward(upstream)
}

/// Shared helper for callers that only need pre-activation logits.
pub fn router_logits<T: Real>(x: &Tensor2D<T>, params: &FfnParams<T>) -> Result<Tensor2D<T>> {
    ops::matmul(x, &params.router)
}
