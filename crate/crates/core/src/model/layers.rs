//! Linear, feed-forward and single-head cross-attention layers with manual backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{softmax, Matrix};
use crate::params::ParamVisit;

/// `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self { w: Matrix::xavier(d_in, d_out, rng), b: Matrix::zeros(1, d_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Matrix::zeros(1, self.b.cols()),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.w)?;
        y.add_row_broadcast(&self.b)?;
        Ok(y)
    }

    pub fn forward_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.w.vecmat(x)?;
        for (o, b) in y.iter_mut().zip(self.b.as_slice()) {
            *o += b;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut Linear) -> Result<Matrix> {
        grads.w.add_assign(&x.t_matmul(dy)?)?;
        grads.b.add_assign(&dy.column_sums())?;
        dy.matmul_t(&self.w)
    }
}

impl ParamVisit for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Two-layer position-wise MLP with ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    input: Matrix,
    activated: Matrix,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(d: usize, d_hidden: usize, rng: &mut R) -> Self {
        let mut out = Linear::new(d_hidden, d, rng);
        out.w.scale(0.5);
        Self { hidden: Linear::new(d, d_hidden, rng), out }
    }

    pub fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FeedForwardCache)> {
        let activated = self.hidden.forward(x)?.map(|v| v.max(0.0));
        let y = self.out.forward(&activated)?;
        Ok((y, FeedForwardCache { input: x.clone(), activated }))
    }

    pub fn backward(
        &self,
        cache: &FeedForwardCache,
        dy: &Matrix,
        grads: &mut FeedForward,
    ) -> Result<Matrix> {
        let mut da = self.out.backward(&cache.activated, dy, &mut grads.out)?;
        for (g, &a) in da.as_mut_slice().iter_mut().zip(cache.activated.as_slice()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        self.hidden.backward(&cache.input, &da, &mut grads.hidden)
    }
}

impl ParamVisit for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// Single-head scaled dot-product attention from `x` rows onto `memory` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttention {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Matrix,
    memory: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    context: Matrix,
}

impl AttentionCache {
    pub fn weights(&self) -> &Matrix {
        &self.attn
    }
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::xavier(d, d, rng),
            w_k: Matrix::xavier(d, d, rng),
            w_v: Matrix::xavier(d, d, rng),
            w_o: Matrix::xavier(d, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self { w_q: z(&self.w_q), w_k: z(&self.w_k), w_v: z(&self.w_v), w_o: z(&self.w_o) }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.w_q.cols() as f64).sqrt()
    }

    /// `key_mask[j] == false` excludes memory row `j`; `bias` is added to the logits.
    pub fn forward(
        &self,
        x: &Matrix,
        memory: &Matrix,
        key_mask: &[bool],
        bias: Option<&Matrix>,
    ) -> Result<(Matrix, AttentionCache)> {
        debug_assert_eq!(key_mask.len(), memory.rows());
        let q = x.matmul(&self.w_q)?;
        let k = memory.matmul(&self.w_k)?;
        let v = memory.matmul(&self.w_v)?;
        let mut logits = q.matmul_t(&k)?;
        logits.scale(self.scale());
        if let Some(b) = bias {
            logits.add_assign(b)?;
        }
        let mut attn = Matrix::zeros(x.rows(), memory.rows());
        let mut valid = Vec::with_capacity(memory.rows());
        for i in 0..x.rows() {
            valid.clear();
            valid.extend(
                logits.row(i).iter().zip(key_mask).filter(|(_, &m)| m).map(|(&l, _)| l),
            );
            let p = softmax(&valid);
            let mut it = p.into_iter();
            for (a, &m) in attn.row_mut(i).iter_mut().zip(key_mask) {
                if m {
                    *a = it.next().expect("one probability per valid key");
                }
            }
        }
        let context = attn.matmul(&v)?;
        let out = context.matmul(&self.w_o)?;
        let cache = AttentionCache { x: x.clone(), memory: memory.clone(), q, k, v, attn, context };
        Ok((out, cache))
    }

    /// Returns `(dx, dmemory)`; accumulates weight gradients and, when given, the
    /// gradient of the additive logit bias.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dout: &Matrix,
        grads: &mut CrossAttention,
        dbias: Option<&mut Matrix>,
    ) -> Result<(Matrix, Matrix)> {
        grads.w_o.add_assign(&cache.context.t_matmul(dout)?)?;
        let dcontext = dout.matmul_t(&self.w_o)?;
        let dattn = dcontext.matmul_t(&cache.v)?;
        let dv = cache.attn.t_matmul(&dcontext)?;
        let mut dlogits = Matrix::zeros(cache.attn.rows(), cache.attn.cols());
        for i in 0..cache.attn.rows() {
            let a = cache.attn.row(i);
            let da = dattn.row(i);
            let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
            for (j, d) in dlogits.row_mut(i).iter_mut().enumerate() {
                *d = a[j] * (da[j] - inner);
            }
        }
        if let Some(db) = dbias {
            db.add_assign(&dlogits)?;
        }
        dlogits.scale(self.scale());
        let dq = dlogits.matmul(&cache.k)?;
        let dk = dlogits.t_matmul(&cache.q)?;
        grads.w_q.add_assign(&cache.x.t_matmul(&dq)?)?;
        grads.w_k.add_assign(&cache.memory.t_matmul(&dk)?)?;
        grads.w_v.add_assign(&cache.memory.t_matmul(&dv)?)?;
        let dx = dq.matmul_t(&self.w_q)?;
        let mut dmem = dk.matmul_t(&self.w_k)?;
        dmem.add_assign(&dv.matmul_t(&self.w_v)?)?;
        Ok((dx, dmem))
    }
}

impl ParamVisit for CrossAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
    }
}

/// Residual cross-attention followed by a residual feed-forward sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub attn: CrossAttention,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    attn: AttentionCache,
    ffn: FeedForwardCache,
}

impl DecoderCache {
    pub fn attention_weights(&self) -> &Matrix {
        self.attn.weights()
    }
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(d: usize, d_hidden: usize, rng: &mut R) -> Self {
        Self { attn: CrossAttention::new(d, rng), ffn: FeedForward::new(d, d_hidden, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { attn: self.attn.zeros_like(), ffn: self.ffn.zeros_like() }
    }

    pub fn forward(
        &self,
        x: &Matrix,
        memory: &Matrix,
        key_mask: &[bool],
        bias: Option<&Matrix>,
    ) -> Result<(Matrix, DecoderCache)> {
        let (a, attn) = self.attn.forward(x, memory, key_mask, bias)?;
        let h = x.add(&a)?;
        let (f, ffn) = self.ffn.forward(&h)?;
        Ok((h.add(&f)?, DecoderCache { attn, ffn }))
    }

    pub fn backward(
        &self,
        cache: &DecoderCache,
        dy: &Matrix,
        grads: &mut DecoderLayer,
        dbias: Option<&mut Matrix>,
    ) -> Result<(Matrix, Matrix)> {
        let mut dh = dy.clone();
        dh.add_assign(&self.ffn.backward(&cache.ffn, dy, &mut grads.ffn)?)?;
        let (dx_attn, dmem) = self.attn.backward(&cache.attn, &dh, &mut grads.attn, dbias)?;
        dh.add_assign(&dx_attn)?;
        Ok((dh, dmem))
    }
}

impl ParamVisit for DecoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}
