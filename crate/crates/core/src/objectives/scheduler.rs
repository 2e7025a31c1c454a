//! Adaptive multiplicative controller for the sparsification coefficient.
//!
//! `λ` stays at `λ⁰` for the first `n_st` steps. Afterwards, at every step
//! that is a multiple of `n_adj`, the ratio `γ` of the current window's mean
//! loss to the previous window's mean loss rescales `λ`: by `γ` when the loss
//! did not grow, by `max(γ_min, γ)` when it did.

use serde::Serialize;

use crate::error::{Error, Result};

/// Scheduler state; owned by a single training loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerState {
    pub lambda: f64,
    pub lambda0: f64,
    pub step: usize,
    pub n_st: usize,
    pub n_adj: usize,
    pub gamma_min: f64,
    pub window_sum_current: f64,
    /// `None` until one full window has been observed.
    pub window_sum_previous: Option<f64>,
    /// Ratio used at the most recent adjustment, if any.
    pub last_gamma: Option<f64>,
}

impl SchedulerState {
    pub fn new(lambda0: f64, n_st: usize, n_adj: usize, gamma_min: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 = {lambda0} must be positive")));
        }
        if n_adj == 0 {
            return Err(Error::Config("n_adj must be positive".into()));
        }
        if !(gamma_min >= 1.0) {
            return Err(Error::Config(format!("gamma_min = {gamma_min} must be at least 1")));
        }
        Ok(Self {
            lambda: lambda0,
            lambda0,
            step: 0,
            n_st,
            n_adj,
            gamma_min,
            window_sum_current: 0.0,
            window_sum_previous: None,
            last_gamma: None,
        })
    }

    /// Observes the loss of one training step and adjusts `λ` at window ends.
    pub fn observe(&mut self, loss: f64) -> Result<()> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(Error::Contract(format!("scheduler loss {loss} must be finite and non-negative")));
        }
        self.step += 1;
        self.window_sum_current += loss;
        if self.step % self.n_adj != 0 {
            return Ok(());
        }
        if self.step <= self.n_st {
            self.lambda = self.lambda0;
        } else if let Some(prev) = self.window_sum_previous {
            // Both windows hold n_adj losses, so the ratio of sums is the ratio of means.
            let prev_avg = prev / self.n_adj as f64;
            if prev_avg > 0.0 {
                let gamma = (self.window_sum_current / self.n_adj as f64) / prev_avg;
                let factor = if gamma <= 1.0 { gamma } else { self.gamma_min.max(gamma) };
                self.lambda *= factor;
                self.last_gamma = Some(gamma);
            }
        }
        self.window_sum_previous = Some(self.window_sum_current);
        self.window_sum_current = 0.0;
        Ok(())
    }
}

/// Functional form of [`SchedulerState::observe`].
pub fn scheduler_step(state: &SchedulerState, loss: f64) -> Result<SchedulerState> {
    let mut next = state.clone();
    next.observe(loss)?;
    Ok(next)
}
