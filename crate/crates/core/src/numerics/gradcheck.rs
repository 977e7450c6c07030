use serde::Serialize;

use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param_count: usize,
    pub passed: bool,
}

impl GradCheckReport {
    /// Folds another report into this one (max error, summed counts).
    pub fn merge(self, other: GradCheckReport, tol: f64) -> GradCheckReport {
        let max_rel_error = self.max_rel_error.max(other.max_rel_error);
        GradCheckReport {
            max_rel_error,
            param_count: self.param_count + other.param_count,
            passed: max_rel_error <= tol,
        }
    }

    pub fn empty() -> GradCheckReport {
        GradCheckReport { max_rel_error: 0.0, param_count: 0, passed: true }
    }
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite difference step must be positive, got {h}")));
    }
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!("finite difference evaluation at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

pub fn check_gradient(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    GradCheckReport { max_rel_error, param_count: analytic.len(), passed: max_rel_error <= tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let g = finite_diff_grad(|p| Ok(p.iter().map(|x| x * x).sum()), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(3.0), &[1.0, -4.0, 9.0], 1e-4).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn product_gradient() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[1]), &[3.0, 5.0], 1e-4).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let r = finite_diff_grad(|p| Ok(1.0 / (p[0] - 1e-4)), &[0.0], 1e-4);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn report_pass_flag_tracks_tolerance() {
        let r = check_gradient(&[1.0, 2.0], &[1.0, 2.001], 1e-4);
        assert!(!r.passed);
        let r = check_gradient(&[1.0, 2.0], &[1.0, 2.0000001], 1e-4);
        assert!(r.passed && r.param_count == 2);
    }
}
