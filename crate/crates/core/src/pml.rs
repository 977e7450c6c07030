//! Parameter-as-memory layer.
//!
//! The layer keeps an inner matrix `W^m` per stream. Each token is first written into
//! it with one gradient step on a reconstruction loss, then read back through a query
//! projection, layer norm and output projection:
//!
//! ```text
//! k = W_K^T r,  v = W_V^T r
//! L(r; W^m) = |W^m k - v|^2
//! W^m <- W^m - eta * 2 (W^m k - v) k^T,   eta = min(sigmoid(w_lr . r), 0.9 / (2|k|^2 + 1e-8))
//! out = W_O^T LN(W^m W_Q^T r)
//! ```
//!
//! Projections are stored input-major (`d_in x d_h`, `d_h x d_out`), so `k` is computed
//! as the row vector `r W_K`. Outer training treats `W^m` as a constant: only the read
//! path (`W_Q`, `W_O`, layer norm, input) is differentiated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, layer_norm_backward, layer_norm_cached, norm_sq, sigmoid, LayerNormCache, Matrix, LN_EPS,
};
use crate::params::ParamVisit;

/// Upper bound factor for the inner learning rate, relative to `1 / (2|k|^2)`.
pub const ETA_CLAMP: f64 = 0.9;

/// Outer (trainable) weights of a parameter-as-memory layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmlLayer {
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_q: Matrix,
    pub w_o: Matrix,
    /// `1 x d_in`
    pub w_lr: Matrix,
    /// `1 x d_h`
    pub ln_gamma: Matrix,
    /// `1 x d_h`
    pub ln_beta: Matrix,
}

/// Inner memory of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmlState {
    pub w_m: Matrix,
    pub step_count: u64,
}

impl PmlState {
    pub fn new(d_h: usize) -> Self {
        Self { w_m: Matrix::zeros(d_h, d_h), step_count: 0 }
    }

    pub fn reset(&mut self) {
        self.w_m.fill(0.0);
        self.step_count = 0;
    }

    pub fn content_hash(&self) -> [u8; 32] {
        self.w_m.content_hash()
    }
}

/// Values recorded by [`PmlLayer::read_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ReadCache {
    input: Vec<f64>,
    ln: LayerNormCache,
    normed: Vec<f64>,
}

/// Gradients of a single read with respect to the read-path parameters and the input.
#[derive(Debug, Clone)]
pub struct PmlReadGradients {
    pub w_q: Matrix,
    pub w_o: Matrix,
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub input: Vec<f64>,
}

impl PmlLayer {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_h: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w_k: Matrix::xavier(d_in, d_h, rng),
            w_v: Matrix::xavier(d_in, d_h, rng),
            w_q: Matrix::xavier(d_in, d_h, rng),
            w_o: Matrix::xavier(d_h, d_out, rng),
            w_lr: Matrix::zeros(1, d_in),
            ln_gamma: Matrix::filled(1, d_h, 1.0),
            ln_beta: Matrix::zeros(1, d_h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_q: z(&self.w_q),
            w_o: z(&self.w_o),
            w_lr: z(&self.w_lr),
            ln_gamma: z(&self.ln_gamma),
            ln_beta: z(&self.ln_beta),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_k.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w_k.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_o.cols()
    }

    pub fn new_state(&self) -> PmlState {
        PmlState::new(self.d_h())
    }

    fn check_input(&self, state: &PmlState, r: &[f64], op: &'static str) -> Result<()> {
        if r.len() != self.d_in() {
            return Err(Error::dim(op, format!("input length {} for d_in {}", r.len(), self.d_in())));
        }
        if state.w_m.shape() != (self.d_h(), self.d_h()) {
            let (a, b) = state.w_m.shape();
            return Err(Error::dim(op, format!("memory {a}x{b} for d_h {}", self.d_h())));
        }
        Ok(())
    }

    /// Key and value projections of `r`.
    pub fn key_value(&self, r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.w_k.vecmat(r)?, self.w_v.vecmat(r)?))
    }

    /// `|W^m k - v|^2` for the current memory.
    pub fn reconstruction_loss(&self, state: &PmlState, r: &[f64]) -> Result<f64> {
        self.check_input(state, r, "reconstruction_loss")?;
        let (k, v) = self.key_value(r)?;
        let pred = state.w_m.matvec(&k)?;
        Ok(pred.iter().zip(&v).map(|(p, t)| (p - t) * (p - t)).sum())
    }

    /// Closed-form gradient `2 (W^m k - v) k^T` of the reconstruction loss.
    pub fn inner_gradient(&self, state: &PmlState, r: &[f64]) -> Result<Matrix> {
        self.check_input(state, r, "inner_gradient")?;
        let (k, v) = self.key_value(r)?;
        let residual: Vec<f64> =
            state.w_m.matvec(&k)?.iter().zip(&v).map(|(p, t)| 2.0 * (p - t)).collect();
        let mut g = Matrix::zeros(self.d_h(), self.d_h());
        g.add_outer(&residual, &k)?;
        Ok(g)
    }

    /// Adaptive inner learning rate with the stability clamp applied.
    pub fn learning_rate(&self, r: &[f64]) -> Result<f64> {
        if r.len() != self.d_in() {
            return Err(Error::dim("learning_rate", format!("input length {}", r.len())));
        }
        let k = self.w_k.vecmat(r)?;
        let eta = sigmoid(dot(self.w_lr.as_slice(), r));
        Ok(eta.min(ETA_CLAMP / (2.0 * norm_sq(&k) + 1e-8)))
    }

    /// One inner gradient step on `r` with the adaptive, clamped rate.
    pub fn memorize(&self, state: &mut PmlState, r: &[f64]) -> Result<()> {
        let eta = self.learning_rate(r)?;
        self.memorize_with_rate(state, r, eta)
    }

    /// One inner gradient step with an explicit rate (no clamp).
    pub fn memorize_with_rate(&self, state: &mut PmlState, r: &[f64], eta: f64) -> Result<()> {
        let grad = self.inner_gradient(state, r)?;
        let mut next = state.w_m.clone();
        next.axpy(-eta, &grad)?;
        if !next.is_finite() {
            return Err(Error::numeric(format!("memory write at step {}", state.step_count)));
        }
        state.w_m = next;
        state.step_count += 1;
        Ok(())
    }

    /// Memory-augmented output for `r`; never mutates `state`.
    pub fn read(&self, state: &PmlState, r: &[f64]) -> Result<Vec<f64>> {
        self.check_input(state, r, "read")?;
        self.read_cached(&state.w_m, r).map(|(out, _)| out)
    }

    pub(crate) fn read_cached(&self, w_m: &Matrix, r: &[f64]) -> Result<(Vec<f64>, ReadCache)> {
        let query = self.w_q.vecmat(r)?;
        let z = w_m.matvec(&query)?;
        let (normed, ln) =
            layer_norm_cached(&z, self.ln_gamma.as_slice(), self.ln_beta.as_slice(), LN_EPS)?;
        let out = self.w_o.vecmat(&normed)?;
        Ok((out, ReadCache { input: r.to_vec(), ln, normed }))
    }

    /// Accumulates read-path gradients into `grads` and returns the input gradient.
    pub(crate) fn read_backward_into(
        &self,
        w_m: &Matrix,
        cache: &ReadCache,
        upstream: &[f64],
        grads: &mut PmlLayer,
    ) -> Result<Vec<f64>> {
        grads.w_o.add_outer(&cache.normed, upstream)?;
        let d_normed = self.w_o.matvec(upstream)?;
        let (dz, dgamma, dbeta) = layer_norm_backward(&cache.ln, self.ln_gamma.as_slice(), &d_normed);
        for (g, d) in grads.ln_gamma.as_mut_slice().iter_mut().zip(&dgamma) {
            *g += d;
        }
        for (g, d) in grads.ln_beta.as_mut_slice().iter_mut().zip(&dbeta) {
            *g += d;
        }
        let dq = w_m.vecmat(&dz)?;
        grads.w_q.add_outer(&cache.input, &dq)?;
        self.w_q.matvec(&dq)
    }

    /// Exact gradients of `upstream . read(r)` with `W^m` held fixed.
    pub fn read_path_gradient(
        &self,
        state: &PmlState,
        r: &[f64],
        upstream: &[f64],
    ) -> Result<PmlReadGradients> {
        self.check_input(state, r, "read_path_gradient")?;
        if upstream.len() != self.d_out() {
            return Err(Error::dim(
                "read_path_gradient",
                format!("upstream length {} for d_out {}", upstream.len(), self.d_out()),
            ));
        }
        let (_, cache) = self.read_cached(&state.w_m, r)?;
        let mut grads = self.zeros_like();
        let input = self.read_backward_into(&state.w_m, &cache, upstream, &mut grads)?;
        Ok(PmlReadGradients {
            w_q: grads.w_q,
            w_o: grads.w_o,
            ln_gamma: grads.ln_gamma,
            ln_beta: grads.ln_beta,
            input,
        })
    }

    /// Write-then-read for one token.
    pub fn step(&self, state: &mut PmlState, r: &[f64]) -> Result<Vec<f64>> {
        self.memorize(state, r)?;
        self.read(state, r)
    }
}

impl ParamVisit for PmlLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.w_lr"), &self.w_lr);
        f(format!("{prefix}.ln_gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &self.ln_beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.w_lr"), &mut self.w_lr);
        f(format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &mut self.ln_beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, finite_diff_grad, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(d: usize) -> PmlLayer {
        PmlLayer {
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            w_q: Matrix::identity(d),
            w_o: Matrix::identity(d),
            w_lr: Matrix::zeros(1, d),
            ln_gamma: Matrix::filled(1, d, 1.0),
            ln_beta: Matrix::zeros(1, d),
        }
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    fn random_layer(seed: u64, d_in: usize, d_h: usize, d_out: usize) -> (PmlLayer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = PmlLayer::new(d_in, d_h, d_out, &mut rng);
        layer.w_lr = Matrix::xavier(1, d_in, &mut rng);
        layer.ln_gamma = layer.ln_gamma.map(|g| g + 0.3);
        layer.ln_beta = Matrix::xavier(1, d_h, &mut rng);
        (layer, rng)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn reconstruction_loss_examples() {
        let layer = identity_layer(2);
        let mut state = layer.new_state();
        assert_eq!(layer.reconstruction_loss(&state, &[1.0, 0.0]).unwrap(), 1.0);
        state.w_m = Matrix::identity(2);
        assert_eq!(layer.reconstruction_loss(&state, &[0.4, -3.0]).unwrap(), 0.0);

        let mut layer = identity_layer(1);
        layer.w_v = scalar(3.0);
        let state = PmlState { w_m: scalar(2.0), step_count: 0 };
        assert_eq!(layer.reconstruction_loss(&state, &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn dimension_errors() {
        let layer = identity_layer(2);
        let state = layer.new_state();
        assert!(matches!(layer.reconstruction_loss(&state, &[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(layer.read(&state, &[1.0, 2.0, 3.0]), Err(Error::Dimension { .. })));
        let wrong = PmlState::new(3);
        assert!(matches!(layer.read(&wrong, &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn null_space_input_leaves_memory_unchanged() {
        let mut layer = identity_layer(2);
        layer.w_k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut state = layer.new_state();
        state.w_m = Matrix::from_rows(&[vec![0.5, 1.0], vec![-2.0, 0.0]]).unwrap();
        let before = state.w_m.clone();
        layer.memorize(&mut state, &[0.0, 4.0]).unwrap();
        assert_eq!(state.w_m, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn forced_rate_single_step() {
        let layer = identity_layer(1);
        let mut state = layer.new_state();
        assert_eq!(layer.reconstruction_loss(&state, &[1.0]).unwrap(), 1.0);
        layer.memorize_with_rate(&mut state, &[1.0], 0.5).unwrap();
        assert_eq!(state.w_m, scalar(1.0));
        assert_eq!(layer.reconstruction_loss(&state, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        let (layer, mut rng) = random_layer(11, 4, 3, 2);
        let mut state = layer.new_state();
        state.w_m = Matrix::xavier(3, 3, &mut rng);
        let r = random_vec(&mut rng, 4);
        let analytic = layer.inner_gradient(&state, &r).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let s = PmlState { w_m: Matrix::from_vec(3, 3, p.to_vec())?, step_count: 0 };
                layer.reconstruction_loss(&s, &r)
            },
            state.w_m.as_slice(),
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(check_gradient(analytic.as_slice(), &fd, 1e-6).passed);
    }

    #[test]
    fn zero_memory_read_is_projected_beta() {
        let (layer, mut rng) = random_layer(5, 3, 4, 2);
        let state = layer.new_state();
        let r = random_vec(&mut rng, 3);
        let out = layer.read(&state, &r).unwrap();
        let expected = layer.w_o.vecmat(layer.ln_beta.as_slice()).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_worked_read() {
        let layer = identity_layer(2);
        let state = PmlState { w_m: Matrix::identity(2), step_count: 0 };
        let out = layer.read(&state, &[2.0, 0.0]).unwrap();
        let expected = 1.0 / (1.0f64 + LN_EPS).sqrt();
        assert!((out[0] - expected).abs() < 1e-12 && (out[1] + expected).abs() < 1e-12);
    }

    #[test]
    fn read_is_pure() {
        let (layer, mut rng) = random_layer(9, 3, 3, 3);
        let mut state = layer.new_state();
        layer.memorize(&mut state, &random_vec(&mut rng, 3)).unwrap();
        let r = random_vec(&mut rng, 3);
        let hash = state.content_hash();
        let a = layer.read(&state, &r).unwrap();
        let b = layer.read(&state, &r).unwrap();
        assert_eq!(a, b);
        assert_eq!(hash, state.content_hash());
    }

    #[test]
    fn step_is_memorize_then_read() {
        let (layer, mut rng) = random_layer(2, 4, 4, 3);
        let r = random_vec(&mut rng, 4);
        let mut s1 = layer.new_state();
        let out = layer.step(&mut s1, &r).unwrap();
        let mut s2 = layer.new_state();
        layer.memorize(&mut s2, &r).unwrap();
        assert_eq!(out, layer.read(&s2, &r).unwrap());
        assert_eq!(s1, s2);
    }

    #[test]
    fn repeated_token_loss_is_non_increasing() {
        let (layer, mut rng) = random_layer(21, 4, 4, 4);
        let r = random_vec(&mut rng, 4);
        let mut state = layer.new_state();
        let mut prev = layer.reconstruction_loss(&state, &r).unwrap();
        for _ in 0..3 {
            layer.step(&mut state, &r).unwrap();
            let now = layer.reconstruction_loss(&state, &r).unwrap();
            assert!(now <= prev);
            prev = now;
        }
    }

    #[test]
    fn reset_reproduces_outputs() {
        let (layer, mut rng) = random_layer(4, 3, 3, 3);
        let seq: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 3)).collect();
        let mut state = layer.new_state();
        let first: Vec<_> = seq.iter().map(|r| layer.step(&mut state, r).unwrap()).collect();
        state.reset();
        assert_eq!(state, layer.new_state());
        let second: Vec<_> = seq.iter().map(|r| layer.step(&mut state, r).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn reset_isolates_streams() {
        let (layer, mut rng) = random_layer(8, 3, 3, 3);
        let a: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
        let run = |first: &[Vec<f64>], second: &[Vec<f64>]| {
            let mut state = layer.new_state();
            for r in first {
                layer.step(&mut state, r).unwrap();
            }
            state.reset();
            second.iter().map(|r| layer.step(&mut state, r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(&a, &b), run(&b, &b));
        assert_eq!(run(&b, &a), run(&a, &a));
    }

    #[test]
    fn read_path_gradient_zero_upstream() {
        let (layer, mut rng) = random_layer(3, 3, 3, 2);
        let mut state = layer.new_state();
        layer.memorize(&mut state, &random_vec(&mut rng, 3)).unwrap();
        let g = layer.read_path_gradient(&state, &random_vec(&mut rng, 3), &[0.0, 0.0]).unwrap();
        assert!(g.w_q.max_abs() == 0.0 && g.w_o.max_abs() == 0.0);
        assert!(g.ln_gamma.max_abs() == 0.0 && g.ln_beta.max_abs() == 0.0);
        assert!(g.input.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn input_gradient_does_not_depend_on_write_projections() {
        let (layer, mut rng) = random_layer(13, 3, 3, 3);
        let mut state = layer.new_state();
        layer.memorize(&mut state, &random_vec(&mut rng, 3)).unwrap();
        let r = random_vec(&mut rng, 3);
        let up = random_vec(&mut rng, 3);
        let g1 = layer.read_path_gradient(&state, &r, &up).unwrap();
        let mut other = layer.clone();
        other.w_k = Matrix::xavier(3, 3, &mut rng);
        other.w_v = Matrix::xavier(3, 3, &mut rng);
        let g2 = other.read_path_gradient(&state, &r, &up).unwrap();
        assert_eq!(g1.input, g2.input);
    }

    #[test]
    fn read_path_gradient_matches_finite_differences() {
        let (layer, mut rng) = random_layer(17, 4, 3, 4);
        let mut state = layer.new_state();
        for _ in 0..3 {
            layer.memorize(&mut state, &random_vec(&mut rng, 4)).unwrap();
        }
        let r = random_vec(&mut rng, 4);
        let up = random_vec(&mut rng, 4);
        let g = layer.read_path_gradient(&state, &r, &up).unwrap();
        let objective = |l: &PmlLayer, x: &[f64]| -> Result<f64> { Ok(dot(&l.read(&state, x)?, &up)) };

        let fd_input = finite_diff_grad(|p| objective(&layer, p), &r, GRAD_CHECK_STEP).unwrap();
        assert!(check_gradient(&g.input, &fd_input, GRAD_CHECK_TOL).passed);

        let fields: [(&str, &Matrix); 4] =
            [("w_q", &g.w_q), ("w_o", &g.w_o), ("ln_gamma", &g.ln_gamma), ("ln_beta", &g.ln_beta)];
        for (name, analytic) in fields {
            let fd = finite_diff_grad(
                |p| {
                    let mut l = layer.clone();
                    let target = match name {
                        "w_q" => &mut l.w_q,
                        "w_o" => &mut l.w_o,
                        "ln_gamma" => &mut l.ln_gamma,
                        _ => &mut l.ln_beta,
                    };
                    target.as_mut_slice().copy_from_slice(p);
                    objective(&l, &r)
                },
                match name {
                    "w_q" => layer.w_q.as_slice(),
                    "w_o" => layer.w_o.as_slice(),
                    "ln_gamma" => layer.ln_gamma.as_slice(),
                    _ => layer.ln_beta.as_slice(),
                },
                GRAD_CHECK_STEP,
            )
            .unwrap();
            let report = check_gradient(analytic.as_slice(), &fd, GRAD_CHECK_TOL);
            assert!(report.passed, "{name}: {report:?}");
        }
    }

    #[test]
    fn orthonormal_pairs_are_recalled() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut layer = identity_layer(d);
        layer.w_v = Matrix::xavier(d, d, &mut rng);
        let mut state = layer.new_state();
        for _ in 0..200 {
            for i in 0..d {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                layer.memorize(&mut state, &e).unwrap();
            }
        }
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            let (k, v) = layer.key_value(&e).unwrap();
            let recalled = state.w_m.matvec(&k).unwrap();
            for (a, b) in recalled.iter().zip(&v) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    proptest! {
        #[test]
        fn write_improves_reconstruction(seed in 0u64..100_000) {
            let (layer, mut rng) = random_layer(seed, 4, 4, 4);
            let mut state = layer.new_state();
            state.w_m = Matrix::xavier(4, 4, &mut rng);
            let r = random_vec(&mut rng, 4);
            let before = layer.reconstruction_loss(&state, &r).unwrap();
            let grad = layer.inner_gradient(&state, &r).unwrap();
            layer.memorize(&mut state, &r).unwrap();
            let after = layer.reconstruction_loss(&state, &r).unwrap();
            if grad.max_abs() > 0.0 {
                prop_assert!(after < before, "{after} !< {before}");
            }
        }
    }
}
