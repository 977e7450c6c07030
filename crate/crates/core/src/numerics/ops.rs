use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Logistic function, saturating without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

/// Pulls a gradient on softmax probabilities `p` back to the logits.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}

/// Intermediate values of a layer norm, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache)> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::dim(
            "layer_norm",
            format!("x {} gamma {} beta {}", x.len(), gamma.len(), beta.len()),
        ));
    }
    if x.is_empty() {
        return Err(Error::dim("layer_norm", "empty input"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = normalized
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((h, g), b)| h * g + b)
        .collect();
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)` for upstream gradient `dy`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = dy.len() as f64;
    let dbeta = dy.to_vec();
    let dgamma: Vec<f64> = dy.iter().zip(&cache.normalized).map(|(d, h)| d * h).collect();
    let dh: Vec<f64> = dy.iter().zip(gamma).map(|(d, g)| d * g).collect();
    let mean_dh = dh.iter().sum::<f64>() / n;
    let mean_dh_h = dot(&dh, &cache.normalized) / n;
    let dx = dh
        .iter()
        .zip(&cache.normalized)
        .map(|(d, h)| cache.inv_std * (d - mean_dh - h * mean_dh_h))
        .collect();
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, finite_diff_grad, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
    use proptest::prelude::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let y = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], LN_EPS).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn symmetric_pair_normalizes_to_unit() {
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gamma_returns_beta() {
        let y = layer_norm(&[4.0, -2.0], &[0.0; 2], &[5.0; 2], LN_EPS).unwrap();
        assert_eq!(y, vec![5.0, 5.0]);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], LN_EPS),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sigmoid_and_softmax_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        let p = softmax(&[2.0, 2.0, 2.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let gamma = [1.1, 0.9, -0.4, 2.0];
        let up = [0.5, -0.25, 1.0, 0.3];
        let (_, cache) = layer_norm_cached(&x, &gamma, &[0.0; 4], LN_EPS).unwrap();
        let (dx, _, _) = layer_norm_backward(&cache, &gamma, &up);
        let fd = finite_diff_grad(
            |p| Ok(dot(&layer_norm(p, &gamma, &[0.0; 4], LN_EPS)?, &up)),
            &x,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(check_gradient(&dx, &fd, GRAD_CHECK_TOL).passed);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant_and_normalized(v in proptest::collection::vec(-30.0f64..30.0, 1..8), c in -50.0f64..50.0) {
            let p = softmax(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }
    }
}
