//! Central finite-difference checking of hand-derived gradients.

use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Coordinate where the worst disagreement occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` with `(f(x+h) − f(x−h)) / 2h` componentwise at `point`.
pub fn grad_check<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} analytic components for {} coordinates", analytic.len(), point.len()),
        ));
    }
    if step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut x = point.to_vec();
    let mut worst = GradCheck { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        if !rel.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        if rel > worst.max_rel_err {
            worst = GradCheck { max_rel_err: rel, worst_index: i, analytic: a, numeric };
        }
    }
    Ok(worst)
}

/// Fails when any value sits within `10 · step` of a kink at zero.
pub fn ensure_clear_of_kinks(values: impl IntoIterator<Item = f64>, step: f64) -> Result<()> {
    let margin = 10.0 * step;
    match values.into_iter().find(|v| v.abs() <= margin) {
        Some(v) => {
            Err(Error::Contract(format!("pre-activation {v:e} within {margin:e} of a kink; resample the point")))
        }
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = grad_check(|x| x[0] * x[0], &[5.0], &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn kink_detection() {
        assert!(ensure_clear_of_kinks([0.5, -0.3], 1e-5).is_ok());
        assert!(ensure_clear_of_kinks([0.5, 5e-5], 1e-5).is_err());
    }
}
