//! Fused expert mixture `y_k = Σ_i A_ki · E_i(x_k)`.
//!
//! Experts only see the tokens that activate them. Each token's output is
//! accumulated over experts in ascending index order, which is the same order
//! the chunk-union kernel uses, so both paths agree bit for bit.

use crate::error::{Error, Result};
use crate::ffn::ExpertKind;
use crate::numerics::ops::{self, swish, swish_grad};
use crate::numerics::tape::Tape;
use crate::numerics::{Real, Tensor2D, Var};

/// Borrowed weights of one expert.
#[derive(Clone, Copy)]
pub struct ExpertRef<'a, T: Real> {
    pub up: &'a Tensor2D<T>,
    pub down: &'a Tensor2D<T>,
    pub gate: Option<&'a Tensor2D<T>>,
}

/// Tape handles of one expert's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertVars {
    pub up: Var,
    pub down: Var,
    pub gate: Option<Var>,
}

pub(crate) struct ExpertSaved<T: Real> {
    tokens: Vec<usize>,
    inputs: Tensor2D<T>,
    up_pre: Tensor2D<T>,
    gate_pre: Option<Tensor2D<T>>,
    hidden: Tensor2D<T>,
    out: Tensor2D<T>,
}

pub(crate) struct MoeRecord<T: Real> {
    x: Var,
    act: Var,
    experts: Vec<ExpertVars>,
    saved: Vec<ExpertSaved<T>>,
}

/// Hidden activation of an expert for a batch of rows.
fn expert_hidden<T: Real>(xs: &Tensor2D<T>, e: ExpertRef<'_, T>) -> (Tensor2D<T>, Option<Tensor2D<T>>, Tensor2D<T>) {
    let up_pre = ops::mm(xs, e.up);
    match e.gate {
        None => {
            let hidden = up_pre.map(swish);
            (up_pre, None, hidden)
        }
        Some(gate) => {
            let gate_pre = ops::mm(xs, gate);
            let mut hidden = gate_pre.map(swish);
            for (h, &u) in hidden.data_mut().iter_mut().zip(up_pre.data()) {
                *h *= u;
            }
            (up_pre, Some(gate_pre), hidden)
        }
    }
}

/// Dense output of one expert on every row of `x`.
pub fn expert_output<T: Real>(x: &Tensor2D<T>, e: ExpertRef<'_, T>) -> Tensor2D<T> {
    let (_, _, hidden) = expert_hidden(x, e);
    ops::mm(&hidden, e.down)
}

fn check_shapes<T: Real>(x: &Tensor2D<T>, act: &Tensor2D<T>, experts: &[ExpertRef<'_, T>]) -> Result<()> {
    if act.rows() != x.rows() || act.cols() != experts.len() {
        return Err(Error::shape(
            "moe",
            format!("x {:?}, activations {:?}, {} experts", x.shape(), act.shape(), experts.len()),
        ));
    }
    for e in experts {
        if e.up.rows() != x.cols() || e.down.cols() != x.cols() || e.down.rows() != e.up.cols() {
            return Err(Error::shape("moe", "expert weights do not match hidden size"));
        }
        if let Some(g) = e.gate {
            if g.shape() != e.up.shape() {
                return Err(Error::shape("moe", "gate and up projections differ"));
            }
        }
    }
    Ok(())
}

/// Sparse mixture: experts with zero activation for a token are skipped.
pub(crate) fn mix_forward<T: Real>(
    x: &Tensor2D<T>,
    act: &Tensor2D<T>,
    experts: &[ExpertRef<'_, T>],
) -> Result<(Tensor2D<T>, Vec<ExpertSaved<T>>)> {
    check_shapes(x, act, experts)?;
    let mut y = Tensor2D::zeros(x.rows(), x.cols());
    let mut saved = Vec::with_capacity(experts.len());
    for (i, &e) in experts.iter().enumerate() {
        let tokens: Vec<usize> = (0..x.rows()).filter(|&k| act[(k, i)] != T::zero()).collect();
        let mut inputs = Tensor2D::zeros(tokens.len(), x.cols());
        for (r, &k) in tokens.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(x.row(k));
        }
        let (up_pre, gate_pre, hidden) = expert_hidden(&inputs, e);
        let out = ops::mm(&hidden, e.down);
        for (r, &k) in tokens.iter().enumerate() {
            let a = act[(k, i)];
            for (yv, &ov) in y.row_mut(k).iter_mut().zip(out.row(r)) {
                *yv += a * ov;
            }
        }
        saved.push(ExpertSaved { tokens, inputs, up_pre, gate_pre, hidden, out });
    }
    Ok((y, saved))
}

/// Dense mixture: every expert runs on every token and is weighted afterwards.
pub fn mix_dense<T: Real>(x: &Tensor2D<T>, act: &Tensor2D<T>, experts: &[ExpertRef<'_, T>]) -> Result<Tensor2D<T>> {
    check_shapes(x, act, experts)?;
    let mut y = Tensor2D::zeros(x.rows(), x.cols());
    for (i, &e) in experts.iter().enumerate() {
        let out = expert_output(x, e);
        for k in 0..x.rows() {
            let a = act[(k, i)];
            for (yv, &ov) in y.row_mut(k).iter_mut().zip(out.row(k)) {
                *yv += a * ov;
            }
        }
    }
    Ok(y)
}

/// Records the fused mixture on `tape`.
pub fn record_moe<T: Real>(tape: &mut Tape<T>, x: Var, act: Var, experts: &[ExpertVars]) -> Result<Var> {
    let refs: Vec<ExpertRef<'_, T>> = experts
        .iter()
        .map(|e| ExpertRef { up: tape.value(e.up), down: tape.value(e.down), gate: e.gate.map(|g| tape.value(g)) })
        .collect();
    let (y, saved) = mix_forward(tape.value(x), tape.value(act), &refs)?;
    let record = MoeRecord { x, act, experts: experts.to_vec(), saved };
    Ok(tape.moe(y, record))
}

impl<T: Real> MoeRecord<T> {
    pub(crate) fn backward(&self, tape: &Tape<T>, upstream: &Tensor2D<T>) -> Vec<(Var, Tensor2D<T>)> {
        let x = tape.value(self.x);
        let act = tape.value(self.act);
        let mut dx = Tensor2D::zeros(x.rows(), x.cols());
        let mut dact = Tensor2D::zeros(act.rows(), act.cols());
        let mut out = Vec::with_capacity(2 + 3 * self.experts.len());
        for (i, (vars, s)) in self.experts.iter().zip(&self.saved).enumerate() {
            let up = tape.value(vars.up);
            let down = tape.value(vars.down);
            let m = s.tokens.len();
            let mut dout = Tensor2D::zeros(m, x.cols());
            for (r, &k) in s.tokens.iter().enumerate() {
                let g = upstream.row(k);
                dact[(k, i)] = ops::dot(g, s.out.row(r));
                let a = act[(k, i)];
                for (d, &gv) in dout.row_mut(r).iter_mut().zip(g) {
                    *d = a * gv;
                }
            }
            let ddown = ops::mm_tn(&s.hidden, &dout);
            let dhidden = ops::mm_nt(&dout, down);
            let (dup_pre, dgate_pre) = match &s.gate_pre {
                None => {
                    let mut d = dhidden;
                    for (dv, &z) in d.data_mut().iter_mut().zip(s.up_pre.data()) {
                        *dv *= swish_grad(z);
                    }
                    (d, None)
                }
                Some(gp) => {
                    let mut dup = dhidden.clone();
                    let mut dgate = dhidden;
                    for j in 0..dup.len() {
                        let z = gp.data()[j];
                        let u = s.up_pre.data()[j];
                        dup.data_mut()[j] *= swish(z);
                        dgate.data_mut()[j] *= u * swish_grad(z);
                    }
                    (dup, Some(dgate))
                }
            };
            let dup = ops::mm_tn(&s.inputs, &dup_pre);
            let mut dxs = ops::mm_nt(&dup_pre, up);
            if let (Some(dg), Some(gvar)) = (&dgate_pre, vars.gate) {
                let gate = tape.value(gvar);
                dxs.add_assign(&ops::mm_nt(dg, gate));
                out.push((gvar, ops::mm_tn(&s.inputs, dg)));
            }
            for (r, &k) in s.tokens.iter().enumerate() {
                for (d, &v) in dx.row_mut(k).iter_mut().zip(dxs.row(r)) {
                    *d += v;
                }
            }
            out.push((vars.up, dup));
            out.push((vars.down, ddown));
        }
        out.push((self.x, dx));
        out.push((self.act, dact));
        out
    }
}

/// Expert kind to `gate` presence consistency.
pub(crate) fn expects_gate(kind: ExpertKind) -> bool {
    matches!(kind, ExpertKind::GatedSwish)
}
