//! Sequence-mixing sublayers that carry (or deliberately do not carry) history.
//!
//! The full model uses the parameter-as-memory layer. Two ablation variants share the
//! same interface: a gated recurrent cell with a fixed-size vector state, and a windowed
//! self-attention layer with no state across steps.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{AttentionCache, CrossAttention};
use crate::error::{Error, Result};
use crate::numerics::{
    layer_norm_backward, layer_norm_cached, sigmoid, LayerNormCache, Matrix, LN_EPS,
};
use crate::params::ParamVisit;
use crate::pml::{PmlLayer, PmlState, ReadCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Pml,
    Recurrent,
    WindowAttention,
}

impl MixerKind {
    pub fn label(self) -> &'static str {
        match self {
            MixerKind::Pml => "pml",
            MixerKind::Recurrent => "recurrent",
            MixerKind::WindowAttention => "window_attention",
        }
    }
}

/// When rows are written into memory relative to when they are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WritePlan {
    /// Write only the last row, then read every row with the updated memory.
    NewestThenReadAll,
    /// For each row in order: write it, then read it.
    Interleaved,
}

/// Gated recurrent cell: `h <- (1 - z) * h + z * tanh(x W_x)`, `z = sigmoid(x W_z)`;
/// read `W_O^T LN(h * (x W_Q))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub w_z: Matrix,
    pub w_x: Matrix,
    pub w_q: Matrix,
    pub w_o: Matrix,
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
}

/// Self-attention over the rows of the current step only: `LN(Attn(x, x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAttention {
    pub attn: CrossAttention,
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mixer {
    Pml(PmlLayer),
    Recurrent(RecurrentCell),
    WindowAttention(WindowAttention),
}

/// Per-stream state of a mixer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixerState {
    Pml(PmlState),
    Recurrent { h: Vec<f64>, step_count: u64 },
    Stateless,
}

impl MixerState {
    pub fn reset(&mut self) {
        match self {
            MixerState::Pml(s) => s.reset(),
            MixerState::Recurrent { h, step_count } => {
                h.fill(0.0);
                *step_count = 0;
            }
            MixerState::Stateless => {}
        }
    }

    pub fn content_hash(&self) -> [u8; 32] {
        match self {
            MixerState::Pml(s) => s.content_hash(),
            MixerState::Recurrent { h, .. } => {
                let mut hasher = Sha256::new();
                for x in h {
                    hasher.update(x.to_le_bytes());
                }
                hasher.finalize().into()
            }
            MixerState::Stateless => Sha256::digest(b"stateless").into(),
        }
    }

    pub fn as_pml(&self) -> Option<&PmlState> {
        match self {
            MixerState::Pml(s) => Some(s),
            _ => None,
        }
    }
}

/// Memory contents used for one row's read.
#[derive(Debug, Clone)]
pub enum MemorySnapshot {
    Pml(Arc<Matrix>),
    Recurrent(Arc<Vec<f64>>),
    None,
}

/// Where a forward pass takes its memory from.
pub enum MemoryAccess<'a> {
    /// Perform writes on a live state (unless `adapt` is false) and read from it.
    Live { state: &'a mut MixerState, plan: WritePlan, adapt: bool },
    /// Read from recorded snapshots without touching any state.
    Replay(&'a [MemorySnapshot]),
}

#[derive(Debug, Clone)]
pub struct RecurrentReadCache {
    input: Vec<f64>,
    ln: LayerNormCache,
    normed: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum MixerCache {
    Pml { reads: Vec<ReadCache>, snapshots: Vec<MemorySnapshot> },
    Recurrent { reads: Vec<RecurrentReadCache>, snapshots: Vec<MemorySnapshot> },
    WindowAttention { attn: AttentionCache, ln: Vec<LayerNormCache> },
}

impl MixerCache {
    pub fn snapshots(&self) -> Vec<MemorySnapshot> {
        match self {
            MixerCache::Pml { snapshots, .. } | MixerCache::Recurrent { snapshots, .. } => {
                snapshots.clone()
            }
            MixerCache::WindowAttention { ln, .. } => vec![MemorySnapshot::None; ln.len()],
        }
    }
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_h: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w_z: Matrix::xavier(d_in, d_h, rng),
            w_x: Matrix::xavier(d_in, d_h, rng),
            w_q: Matrix::xavier(d_in, d_h, rng),
            w_o: Matrix::xavier(d_h, d_out, rng),
            ln_gamma: Matrix::filled(1, d_h, 1.0),
            ln_beta: Matrix::zeros(1, d_h),
        }
    }

    fn write(&self, h: &mut [f64], x: &[f64]) -> Result<()> {
        let z = self.w_z.vecmat(x)?;
        let c = self.w_x.vecmat(x)?;
        for ((hi, zi), ci) in h.iter_mut().zip(&z).zip(&c) {
            let gate = sigmoid(*zi);
            *hi = (1.0 - gate) * *hi + gate * ci.tanh();
        }
        Ok(())
    }

    fn read_cached(&self, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, RecurrentReadCache)> {
        let q = self.w_q.vecmat(x)?;
        let u: Vec<f64> = q.iter().zip(h).map(|(a, b)| a * b).collect();
        let (normed, ln) =
            layer_norm_cached(&u, self.ln_gamma.as_slice(), self.ln_beta.as_slice(), LN_EPS)?;
        let out = self.w_o.vecmat(&normed)?;
        Ok((out, RecurrentReadCache { input: x.to_vec(), ln, normed }))
    }

    fn read_backward_into(
        &self,
        h: &[f64],
        cache: &RecurrentReadCache,
        upstream: &[f64],
        grads: &mut RecurrentCell,
    ) -> Result<Vec<f64>> {
        grads.w_o.add_outer(&cache.normed, upstream)?;
        let d_normed = self.w_o.matvec(upstream)?;
        let (du, dgamma, dbeta) = layer_norm_backward(&cache.ln, self.ln_gamma.as_slice(), &d_normed);
        add_into(grads.ln_gamma.as_mut_slice(), &dgamma);
        add_into(grads.ln_beta.as_mut_slice(), &dbeta);
        let dq: Vec<f64> = du.iter().zip(h).map(|(a, b)| a * b).collect();
        grads.w_q.add_outer(&cache.input, &dq)?;
        self.w_q.matvec(&dq)
    }
}

impl WindowAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            attn: CrossAttention::new(d, rng),
            ln_gamma: Matrix::filled(1, d, 1.0),
            ln_beta: Matrix::zeros(1, d),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

impl Mixer {
    /// Builds a square (`d -> d`) mixer of the requested kind.
    pub fn new<R: Rng + ?Sized>(kind: MixerKind, d: usize, rng: &mut R) -> Self {
        match kind {
            MixerKind::Pml => {
                let mut layer = PmlLayer::new(d, d, d, rng);
                layer.w_lr = Matrix::xavier(1, d, rng);
                Mixer::Pml(layer)
            }
            MixerKind::Recurrent => Mixer::Recurrent(RecurrentCell::new(d, d, d, rng)),
            MixerKind::WindowAttention => Mixer::WindowAttention(WindowAttention::new(d, rng)),
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Pml(_) => MixerKind::Pml,
            Mixer::Recurrent(_) => MixerKind::Recurrent,
            Mixer::WindowAttention(_) => MixerKind::WindowAttention,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Mixer::Pml(l) => Mixer::Pml(l.zeros_like()),
            Mixer::Recurrent(c) => Mixer::Recurrent(RecurrentCell {
                w_z: zeros_like(&c.w_z),
                w_x: zeros_like(&c.w_x),
                w_q: zeros_like(&c.w_q),
                w_o: zeros_like(&c.w_o),
                ln_gamma: zeros_like(&c.ln_gamma),
                ln_beta: zeros_like(&c.ln_beta),
            }),
            Mixer::WindowAttention(a) => Mixer::WindowAttention(WindowAttention {
                attn: a.attn.zeros_like(),
                ln_gamma: zeros_like(&a.ln_gamma),
                ln_beta: zeros_like(&a.ln_beta),
            }),
        }
    }

    pub fn new_state(&self) -> MixerState {
        match self {
            Mixer::Pml(l) => MixerState::Pml(l.new_state()),
            Mixer::Recurrent(c) => MixerState::Recurrent { h: vec![0.0; c.w_q.cols()], step_count: 0 },
            Mixer::WindowAttention(_) => MixerState::Stateless,
        }
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mask: &[bool],
        access: MemoryAccess<'_>,
    ) -> Result<(Matrix, MixerCache)> {
        match self {
            Mixer::Pml(layer) => pml_forward(layer, x, access),
            Mixer::Recurrent(cell) => recurrent_forward(cell, x, access),
            Mixer::WindowAttention(wa) => {
                let (a, attn) = wa.attn.forward(x, x, mask, None)?;
                let mut out = Matrix::zeros(a.rows(), a.cols());
                let mut lns = Vec::with_capacity(a.rows());
                for i in 0..a.rows() {
                    let (y, ln) = layer_norm_cached(
                        a.row(i),
                        wa.ln_gamma.as_slice(),
                        wa.ln_beta.as_slice(),
                        LN_EPS,
                    )?;
                    out.row_mut(i).copy_from_slice(&y);
                    lns.push(ln);
                }
                Ok((out, MixerCache::WindowAttention { attn, ln: lns }))
            }
        }
    }

    /// Read-path backward; memory contents are treated as constants.
    pub fn backward(&self, cache: &MixerCache, dout: &Matrix, grads: &mut Mixer) -> Result<Matrix> {
        match (self, cache, grads) {
            (Mixer::Pml(layer), MixerCache::Pml { reads, snapshots }, Mixer::Pml(g)) => {
                let mut dx = Matrix::zeros(dout.rows(), layer.d_in());
                for (i, (read, snap)) in reads.iter().zip(snapshots).enumerate() {
                    let MemorySnapshot::Pml(w_m) = snap else {
                        return Err(Error::Usage("snapshot kind does not match mixer".into()));
                    };
                    let d = layer.read_backward_into(w_m, read, dout.row(i), g)?;
                    dx.row_mut(i).copy_from_slice(&d);
                }
                Ok(dx)
            }
            (
                Mixer::Recurrent(cell),
                MixerCache::Recurrent { reads, snapshots },
                Mixer::Recurrent(g),
            ) => {
                let mut dx = Matrix::zeros(dout.rows(), cell.w_q.rows());
                for (i, (read, snap)) in reads.iter().zip(snapshots).enumerate() {
                    let MemorySnapshot::Recurrent(h) = snap else {
                        return Err(Error::Usage("snapshot kind does not match mixer".into()));
                    };
                    let d = cell.read_backward_into(h, read, dout.row(i), g)?;
                    dx.row_mut(i).copy_from_slice(&d);
                }
                Ok(dx)
            }
            (
                Mixer::WindowAttention(wa),
                MixerCache::WindowAttention { attn, ln },
                Mixer::WindowAttention(g),
            ) => {
                let mut da = Matrix::zeros(dout.rows(), dout.cols());
                for (i, cache) in ln.iter().enumerate() {
                    let (d, dgamma, dbeta) =
                        layer_norm_backward(cache, wa.ln_gamma.as_slice(), dout.row(i));
                    add_into(g.ln_gamma.as_mut_slice(), &dgamma);
                    add_into(g.ln_beta.as_mut_slice(), &dbeta);
                    da.row_mut(i).copy_from_slice(&d);
                }
                let (mut dx, dmem) = wa.attn.backward(attn, &da, &mut g.attn, None)?;
                dx.add_assign(&dmem)?;
                Ok(dx)
            }
            _ => Err(Error::Usage("mixer, cache and gradient variants differ".into())),
        }
    }
}

fn state_mismatch() -> Error {
    Error::Usage("mixer state does not belong to this mixer kind".into())
}

fn pml_forward(
    layer: &PmlLayer,
    x: &Matrix,
    access: MemoryAccess<'_>,
) -> Result<(Matrix, MixerCache)> {
    let n = x.rows();
    let mut out = Matrix::zeros(n, layer.d_out());
    let mut reads = Vec::with_capacity(n);
    let mut snapshots = Vec::with_capacity(n);
    match access {
        MemoryAccess::Live { state, plan, adapt } => {
            let MixerState::Pml(state) = state else { return Err(state_mismatch()) };
            match plan {
                WritePlan::NewestThenReadAll => {
                    if adapt {
                        layer.memorize(state, x.row(n - 1))?;
                    }
                    let snap = Arc::new(state.w_m.clone());
                    for i in 0..n {
                        let (y, c) = layer.read_cached(&snap, x.row(i))?;
                        out.row_mut(i).copy_from_slice(&y);
                        reads.push(c);
                        snapshots.push(MemorySnapshot::Pml(Arc::clone(&snap)));
                    }
                }
                WritePlan::Interleaved => {
                    for i in 0..n {
                        if adapt {
                            layer.memorize(state, x.row(i))?;
                        }
                        let snap = Arc::new(state.w_m.clone());
                        let (y, c) = layer.read_cached(&snap, x.row(i))?;
                        out.row_mut(i).copy_from_slice(&y);
                        reads.push(c);
                        snapshots.push(MemorySnapshot::Pml(snap));
                    }
                }
            }
        }
        MemoryAccess::Replay(snaps) => {
            for i in 0..n {
                let MemorySnapshot::Pml(w_m) = &snaps[i] else { return Err(state_mismatch()) };
                let (y, c) = layer.read_cached(w_m, x.row(i))?;
                out.row_mut(i).copy_from_slice(&y);
                reads.push(c);
                snapshots.push(snaps[i].clone());
            }
        }
    }
    Ok((out, MixerCache::Pml { reads, snapshots }))
}

fn recurrent_forward(
    cell: &RecurrentCell,
    x: &Matrix,
    access: MemoryAccess<'_>,
) -> Result<(Matrix, MixerCache)> {
    let n = x.rows();
    let mut out = Matrix::zeros(n, cell.w_o.cols());
    let mut reads = Vec::with_capacity(n);
    let mut snapshots = Vec::with_capacity(n);
    match access {
        MemoryAccess::Live { state, plan, adapt } => {
            let MixerState::Recurrent { h, step_count } = state else {
                return Err(state_mismatch());
            };
            let mut write = |h: &mut Vec<f64>, row: &[f64]| -> Result<()> {
                cell.write(h, row)?;
                *step_count += 1;
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("recurrent write at step {step_count}")));
                }
                Ok(())
            };
            match plan {
                WritePlan::NewestThenReadAll => {
                    if adapt {
                        write(h, x.row(n - 1))?;
                    }
                    let snap = Arc::new(h.clone());
                    for i in 0..n {
                        let (y, c) = cell.read_cached(&snap, x.row(i))?;
                        out.row_mut(i).copy_from_slice(&y);
                        reads.push(c);
                        snapshots.push(MemorySnapshot::Recurrent(Arc::clone(&snap)));
                    }
                }
                WritePlan::Interleaved => {
                    for i in 0..n {
                        if adapt {
                            write(h, x.row(i))?;
                        }
                        let snap = Arc::new(h.clone());
                        let (y, c) = cell.read_cached(&snap, x.row(i))?;
                        out.row_mut(i).copy_from_slice(&y);
                        reads.push(c);
                        snapshots.push(MemorySnapshot::Recurrent(snap));
                    }
                }
            }
        }
        MemoryAccess::Replay(snaps) => {
            for i in 0..n {
                let MemorySnapshot::Recurrent(h) = &snaps[i] else { return Err(state_mismatch()) };
                let (y, c) = cell.read_cached(h, x.row(i))?;
                out.row_mut(i).copy_from_slice(&y);
                reads.push(c);
                snapshots.push(snaps[i].clone());
            }
        }
    }
    Ok((out, MixerCache::Recurrent { reads, snapshots }))
}

impl ParamVisit for Mixer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        match self {
            Mixer::Pml(l) => l.visit(&format!("{prefix}.pml"), f),
            Mixer::Recurrent(c) => {
                f(format!("{prefix}.rnn.w_z"), &c.w_z);
                f(format!("{prefix}.rnn.w_x"), &c.w_x);
                f(format!("{prefix}.rnn.w_q"), &c.w_q);
                f(format!("{prefix}.rnn.w_o"), &c.w_o);
                f(format!("{prefix}.rnn.ln_gamma"), &c.ln_gamma);
                f(format!("{prefix}.rnn.ln_beta"), &c.ln_beta);
            }
            Mixer::WindowAttention(a) => {
                a.attn.visit(&format!("{prefix}.watt"), f);
                f(format!("{prefix}.watt.ln_gamma"), &a.ln_gamma);
                f(format!("{prefix}.watt.ln_beta"), &a.ln_beta);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        match self {
            Mixer::Pml(l) => l.visit_mut(&format!("{prefix}.pml"), f),
            Mixer::Recurrent(c) => {
                f(format!("{prefix}.rnn.w_z"), &mut c.w_z);
                f(format!("{prefix}.rnn.w_x"), &mut c.w_x);
                f(format!("{prefix}.rnn.w_q"), &mut c.w_q);
                f(format!("{prefix}.rnn.w_o"), &mut c.w_o);
                f(format!("{prefix}.rnn.ln_gamma"), &mut c.ln_gamma);
                f(format!("{prefix}.rnn.ln_beta"), &mut c.ln_beta);
            }
            Mixer::WindowAttention(a) => {
                a.attn.visit_mut(&format!("{prefix}.watt"), f);
                f(format!("{prefix}.watt.ln_gamma"), &mut a.ln_gamma);
                f(format!("{prefix}.watt.ln_beta"), &mut a.ln_beta);
            }
        }
    }
}
