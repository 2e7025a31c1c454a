//! AdamW, global-norm clipping and the warmup/stable/decay schedule.

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor2D};

/// Learning rate at 1-based `step`: linear warmup, constant, then linear
/// decay to zero.
pub fn lr_at(config: &OptimConfig, step: usize) -> f64 {
    let (w, s, d) = (config.warmup, config.stable, config.decay);
    if step <= w {
        config.lr * step as f64 / w.max(1) as f64
    } else if step <= w + s || d == 0 {
        config.lr
    } else {
        let left = (w + s + d).saturating_sub(step);
        config.lr * left as f64 / d as f64
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor2D<T>], max_norm: f64) -> Result<f64> {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// Adam moments with decoupled weight decay. Decay skips `1 × n` tensors
/// (norm and router gains).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    m: Vec<Tensor2D<T>>,
    v: Vec<Tensor2D<T>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: &OptimConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Tensor2D::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2D::zeros(r, c)).collect(),
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2D<T>], grads: &[Tensor2D<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adamw", "parameter count changed"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("param {:?}, grad {:?}", p.shape(), g.shape())));
            }
            let decay = if p.rows() > 1 { T::lit(1.0 - lr * self.weight_decay) } else { T::one() };
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
