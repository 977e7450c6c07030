//! One streaming step of the network and its manual backward pass.
//!
//! A step runs: query assembly (once per stream) → fusion decoder (window rows attend
//! over query tokens) → memory blocks → anchor decoder → classification/regression
//! heads → prediction refinement → selection. Memory writes happen inside the forward
//! pass; the backward pass treats every memory content as a constant.

use serde::{Deserialize, Serialize};

use super::layers::{DecoderCache, FeedForwardCache};
use super::mixer::{MemoryAccess, MemorySnapshot, MixerCache, MixerState, WritePlan};
use super::weights::ModelWeights;
use super::{AnchorConfig, Modality, QueryBundle};
use crate::error::{Error, Result};
use crate::numerics::{softmax, softmax_backward, Matrix};

/// Query tokens `[m_a, F_a, m_b, F_b, ...]` in canonical modality order, plus what
/// the backward pass needs to reach the projections.
#[derive(Debug, Clone)]
pub struct AssembledQuery {
    pub tokens: Matrix,
    parts: Vec<(Modality, Matrix, usize)>,
}

impl AssembledQuery {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

pub fn assemble_query(weights: &ModelWeights, query: &QueryBundle) -> Result<AssembledQuery> {
    let d = weights.config.model_dim;
    let total: usize = query.parts().iter().map(|(_, f)| f.rows() + 1).sum();
    let mut tokens = Matrix::zeros(total, d);
    let mut parts = Vec::with_capacity(query.parts().len());
    let mut row = 0;
    for (m, feats) in query.parts() {
        let proj = weights.query_projection(*m)?;
        if feats.cols() != proj.d_in() {
            return Err(Error::Config(format!(
                "{m} query features have dimension {}, model expects {}",
                feats.cols(),
                proj.d_in()
            )));
        }
        tokens.row_mut(row).copy_from_slice(weights.modality_tokens.row(m.index()));
        let projected = proj.forward(feats)?;
        for i in 0..projected.rows() {
            tokens.row_mut(row + 1 + i).copy_from_slice(projected.row(i));
        }
        parts.push((*m, feats.clone(), row));
        row += feats.rows() + 1;
    }
    Ok(AssembledQuery { tokens, parts })
}

fn assemble_backward(
    weights: &ModelWeights,
    query: &AssembledQuery,
    dtokens: &Matrix,
    grads: &mut ModelWeights,
) -> Result<()> {
    for (m, feats, start) in &query.parts {
        let i = m.index();
        for (g, d) in grads.modality_tokens.row_mut(i).iter_mut().zip(dtokens.row(*start)) {
            *g += d;
        }
        let mut dproj = Matrix::zeros(feats.rows(), dtokens.cols());
        for r in 0..feats.rows() {
            dproj.row_mut(r).copy_from_slice(dtokens.row(start + 1 + r));
        }
        let proj = weights.query_projection(*m)?;
        let gproj = grads.query_proj[i]
            .as_mut()
            .ok_or_else(|| Error::Usage(format!("gradient buffer lacks {m} projection")))?;
        proj.backward(feats, &dproj, gproj)?;
    }
    Ok(())
}

/// Contents of the sliding window at stream time `t` (seconds, window end).
#[derive(Debug, Clone)]
pub struct WindowFeatures {
    /// Snippet features, `K x D_v`; `None` when only projected features were supplied.
    pub raw: Option<Matrix>,
    /// Snippet features after the video projection, `K x D`.
    pub projected: Matrix,
    /// `false` marks left padding.
    pub mask: Vec<bool>,
    pub t: f64,
}

impl WindowFeatures {
    /// Projects raw snippet features.
    pub fn project(weights: &ModelWeights, raw: Matrix, mask: Vec<bool>, t: f64) -> Result<Self> {
        let projected = project_snippets(weights, &raw)?;
        Self::check(&projected, &mask, weights.config.window)?;
        Ok(Self { raw: Some(raw), projected, mask, t })
    }

    /// Uses features that were already projected (e.g. from a cache).
    pub fn from_projected(projected: Matrix, mask: Vec<bool>, t: f64) -> Result<Self> {
        Self::check(&projected, &mask, projected.rows())?;
        Ok(Self { raw: None, projected, mask, t })
    }

    fn check(projected: &Matrix, mask: &[bool], k: usize) -> Result<()> {
        if projected.rows() != k || mask.len() != k {
            return Err(Error::Config(format!(
                "window has {} rows and {} mask entries, expected {k}",
                projected.rows(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Usage("window contains no observed snippet".into()));
        }
        Ok(())
    }
}

/// Applies the video projection row-wise. Each output row depends only on its input row.
pub fn project_snippets(weights: &ModelWeights, raw: &Matrix) -> Result<Matrix> {
    if raw.cols() != weights.config.video_dim {
        return Err(Error::Config(format!(
            "snippet features have dimension {}, model expects video_dim {}",
            raw.cols(),
            weights.config.video_dim
        )));
    }
    weights.video_proj.forward(raw)
}

/// Per-anchor two-way scores and offsets. Column 0 of `probs` is `s_f`, column 1
/// `s_b`; column 0 of `offsets` is `dl`, column 1 `do`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrediction {
    pub logits: Matrix,
    pub probs: Matrix,
    pub offsets: Matrix,
}

pub type RawPrediction = AnchorPrediction;
pub type RefinedPrediction = AnchorPrediction;

impl AnchorPrediction {
    fn from_logits(logits: Matrix, offsets: Matrix) -> Self {
        let mut probs = Matrix::zeros(logits.rows(), 2);
        for i in 0..logits.rows() {
            probs.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
        }
        Self { logits, probs, offsets }
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn foreground(&self, n: usize) -> f64 {
        self.probs.get(n, 0)
    }

    pub fn background(&self, n: usize) -> f64 {
        self.probs.get(n, 1)
    }

    pub fn length_offset(&self, n: usize) -> f64 {
        self.offsets.get(n, 0)
    }

    pub fn end_offset(&self, n: usize) -> f64 {
        self.offsets.get(n, 1)
    }

    /// `[s_f, s_b, dl, do]` per anchor.
    fn packed(&self) -> Matrix {
        let mut p = Matrix::zeros(self.len(), 4);
        for i in 0..self.len() {
            let row = p.row_mut(i);
            row[..2].copy_from_slice(self.probs.row(i));
            row[2..].copy_from_slice(self.offsets.row(i));
        }
        p
    }
}

/// All mutable per-stream state of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSession {
    stream_id: u64,
    pub fusion: Vec<MixerState>,
    pub prm: MixerState,
    /// When false, memory writes are skipped and reads see the initial memory.
    pub adapt: bool,
}

impl ModelSession {
    pub fn new(weights: &ModelWeights, stream_id: u64) -> Self {
        Self {
            stream_id,
            fusion: weights.new_fusion_states(),
            prm: weights.new_prm_state(),
            adapt: true,
        }
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn reset(&mut self) {
        for s in &mut self.fusion {
            s.reset();
        }
        self.prm.reset();
    }

    /// Hash over every memory content.
    pub fn memory_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in self.fusion.iter().chain(std::iter::once(&self.prm)) {
            h.update(s.content_hash());
        }
        hex::encode(h.finalize())
    }

    fn check_stream(&self, stream_id: u64) -> Result<()> {
        if self.stream_id != stream_id {
            return Err(Error::Usage(format!(
                "session belongs to stream {}, called for stream {stream_id}",
                self.stream_id
            )));
        }
        Ok(())
    }
}

/// Memory contents read during one step, sufficient to replay the step without state.
#[derive(Debug, Clone)]
pub struct StepSnapshots {
    pub fusion: Vec<Vec<MemorySnapshot>>,
    pub prm: Vec<MemorySnapshot>,
}

/// Where a step's memory comes from.
pub enum StepMemory<'a> {
    /// Write into (when the session adapts) and read from a live session.
    Live(&'a mut ModelSession),
    /// Read from recorded snapshots; used by finite-difference checks.
    Replay(&'a StepSnapshots),
}

#[derive(Debug, Clone)]
struct MemoryBlockCache {
    mixer: MixerCache,
    ffn: FeedForwardCache,
}

#[derive(Debug, Clone)]
struct StepCache {
    window: WindowFeatures,
    fusion: Vec<DecoderCache>,
    memory: Vec<MemoryBlockCache>,
    fused: Matrix,
    decoder: Vec<DecoderCache>,
    packed: Matrix,
    prm_mixer: MixerCache,
    prm_out: Matrix,
}

/// Outputs of one step; `cache` is kept only when requested.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub anchor_features: Matrix,
    pub raw: RawPrediction,
    pub refined: RefinedPrediction,
    pub snapshots: StepSnapshots,
    cache: Option<StepCache>,
}

impl StepForward {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Anchor-decoder attention weights over window rows, one `N x K` matrix per layer.
    pub fn decoder_attention(&self) -> Option<Vec<Matrix>> {
        self.cache
            .as_ref()
            .map(|c| c.decoder.iter().map(|d| d.attention_weights().clone()).collect())
    }
}

/// Loss gradients with respect to step outputs. Each matrix has the shape of the
/// corresponding output.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    /// `d/d probs` of the refined prediction, `N x 2`.
    pub refined_probs: Matrix,
    /// `d/d offsets` of the refined prediction, `N x 2`.
    pub refined_offsets: Matrix,
    /// `d/d F_a`, `N x D`.
    pub anchor_features: Matrix,
}

impl OutputGrads {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            refined_probs: Matrix::zeros(n, 2),
            refined_offsets: Matrix::zeros(n, 2),
            anchor_features: Matrix::zeros(n, d),
        }
    }
}

fn fuse_cached(
    weights: &ModelWeights,
    query: &AssembledQuery,
    window: &WindowFeatures,
    mut memory: Option<&mut StepMemory<'_>>,
) -> Result<(Matrix, Vec<DecoderCache>, Vec<MemoryBlockCache>, Vec<Vec<MemorySnapshot>>)> {
    let key_mask = vec![true; query.len()];
    let mut x = window.projected.clone();
    let mut fusion = Vec::with_capacity(weights.fusion.len());
    for layer in &weights.fusion {
        let (y, c) = layer.forward(&x, &query.tokens, &key_mask, None)?;
        x = y;
        fusion.push(c);
    }
    let mut blocks = Vec::with_capacity(weights.memory.len());
    let mut snaps = Vec::with_capacity(weights.memory.len());
    for (b, block) in weights.memory.iter().enumerate() {
        let access = match memory.as_deref_mut() {
            Some(StepMemory::Live(session)) => MemoryAccess::Live {
                state: &mut session.fusion[b],
                plan: WritePlan::NewestThenReadAll,
                adapt: session.adapt,
            },
            Some(StepMemory::Replay(s)) => MemoryAccess::Replay(&s.fusion[b]),
            None => return Err(Error::Usage("fusion needs a memory source".into())),
        };
        let (m, mixer) = block.mixer.forward(&x, &window.mask, access)?;
        let h = x.add(&m)?;
        let (f, ffn) = block.ffn.forward(&h)?;
        x = h.add(&f)?;
        snaps.push(mixer.snapshots());
        blocks.push(MemoryBlockCache { mixer, ffn });
    }
    Ok((x, fusion, blocks, snaps))
}

fn decode_cached(
    weights: &ModelWeights,
    fused: &Matrix,
    mask: &[bool],
) -> Result<(Matrix, RawPrediction, Vec<DecoderCache>)> {
    if fused.rows() != mask.len() || mask.len() != weights.config.window {
        return Err(Error::Config(format!(
            "fused window has {} rows and mask {} entries, expected {}",
            fused.rows(),
            mask.len(),
            weights.config.window
        )));
    }
    let mut a = weights.anchor_embed.clone();
    let mut caches = Vec::with_capacity(weights.decoder.len());
    for (layer, bias) in weights.decoder.iter().zip(&weights.anchor_bias) {
        let (y, c) = layer.forward(&a, fused, mask, Some(bias))?;
        a = y;
        caches.push(c);
    }
    let logits = weights.cls_head.forward(&a)?;
    let offsets = weights.reg_head.forward(&a)?;
    Ok((a, AnchorPrediction::from_logits(logits, offsets), caches))
}

fn refine_cached(
    weights: &ModelWeights,
    anchor_features: &Matrix,
    raw: &RawPrediction,
    access: MemoryAccess<'_>,
) -> Result<(RefinedPrediction, Matrix, Matrix, MixerCache, Matrix)> {
    let packed = raw.packed();
    let mut combined = anchor_features.matmul(&weights.prm_anchor_proj)?;
    combined.add_assign(&weights.prm_pred_proj.forward(&packed)?)?;
    let mask = vec![true; combined.rows()];
    let (m, mixer) = weights.prm_mixer.forward(&combined, &mask, access)?;
    let out = combined.add(&m)?;
    let mut logits = raw.logits.clone();
    logits.add_assign(&weights.prm_cls.forward(&out)?)?;
    let mut offsets = raw.offsets.clone();
    offsets.add_assign(&weights.prm_reg.forward(&out)?)?;
    Ok((AnchorPrediction::from_logits(logits, offsets), packed, combined, mixer, out))
}

/// Fusion of the window with the query through cross-attention and memory blocks.
/// Writes the newest snippet into each fusion memory of `session`.
pub fn fuse(
    weights: &ModelWeights,
    query: &AssembledQuery,
    window: &WindowFeatures,
    session: &mut ModelSession,
    stream_id: u64,
) -> Result<Matrix> {
    session.check_stream(stream_id)?;
    let mut memory = StepMemory::Live(session);
    Ok(fuse_cached(weights, query, window, Some(&mut memory))?.0)
}

/// Anchor queries attend over the fused window; heads give scores and offsets.
pub fn decode_anchors(
    weights: &ModelWeights,
    fused: &Matrix,
    mask: &[bool],
) -> Result<(Matrix, RawPrediction)> {
    let (a, raw, _) = decode_cached(weights, fused, mask)?;
    Ok((a, raw))
}

/// Refines raw predictions with the prediction memory of `session`, one anchor at a
/// time, longest anchor first.
pub fn refine(
    weights: &ModelWeights,
    session: &mut ModelSession,
    stream_id: u64,
    anchor_features: &Matrix,
    raw: &RawPrediction,
) -> Result<RefinedPrediction> {
    session.check_stream(stream_id)?;
    let adapt = session.adapt;
    let access = MemoryAccess::Live { state: &mut session.prm, plan: WritePlan::Interleaved, adapt };
    Ok(refine_cached(weights, anchor_features, raw, access)?.0)
}

/// Runs one full step. With `keep_cache`, the result can be passed to [`model_backward`].
pub fn forward_step(
    weights: &ModelWeights,
    query: &AssembledQuery,
    window: &WindowFeatures,
    mut memory: StepMemory<'_>,
    keep_cache: bool,
) -> Result<StepForward> {
    let (fused, fusion, blocks, fusion_snaps) =
        fuse_cached(weights, query, window, Some(&mut memory))?;
    let (anchor_features, raw, decoder) = decode_cached(weights, &fused, &window.mask)?;
    let access = match &mut memory {
        StepMemory::Live(session) => MemoryAccess::Live {
            state: &mut session.prm,
            plan: WritePlan::Interleaved,
            adapt: session.adapt,
        },
        StepMemory::Replay(s) => MemoryAccess::Replay(&s.prm),
    };
    let (refined, packed, _, prm_mixer, prm_out) =
        refine_cached(weights, &anchor_features, &raw, access)?;
    let snapshots = StepSnapshots { fusion: fusion_snaps, prm: prm_mixer.snapshots() };
    let cache = keep_cache.then(|| StepCache {
        window: window.clone(),
        fusion,
        memory: blocks,
        fused,
        decoder,
        packed,
        prm_mixer,
        prm_out,
    });
    if !refined.probs.is_finite() || !refined.offsets.is_finite() {
        return Err(Error::numeric(format!("model output at t = {}", window.t)));
    }
    Ok(StepForward { anchor_features, raw, refined, snapshots, cache })
}

fn softmax_backward_rows(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        out.row_mut(i).copy_from_slice(&softmax_backward(probs.row(i), dprobs.row(i)));
    }
    out
}

/// Accumulates into `grads` the gradient of a loss whose output gradients are `dout`.
/// Memory contents are constants; the memory write parameters receive no gradient.
pub fn model_backward(
    weights: &ModelWeights,
    query: &AssembledQuery,
    step: &StepForward,
    dout: &OutputGrads,
    grads: &mut ModelWeights,
) -> Result<()> {
    let cache = step
        .cache
        .as_ref()
        .ok_or_else(|| Error::Usage("backward called on a step run without cache".into()))?;
    let refined = &step.refined;
    let raw = &step.raw;

    // refinement
    let d_refined_logits = softmax_backward_rows(&refined.probs, &dout.refined_probs);
    let mut d_raw_logits = d_refined_logits.clone();
    let mut d_raw_offsets = dout.refined_offsets.clone();
    let mut d_prm_out =
        weights.prm_cls.backward(&cache.prm_out, &d_refined_logits, &mut grads.prm_cls)?;
    d_prm_out.add_assign(&weights.prm_reg.backward(
        &cache.prm_out,
        &dout.refined_offsets,
        &mut grads.prm_reg,
    )?)?;
    let mut d_combined = d_prm_out.clone();
    d_combined.add_assign(&weights.prm_mixer.backward(
        &cache.prm_mixer,
        &d_prm_out,
        &mut grads.prm_mixer,
    )?)?;
    grads.prm_anchor_proj.add_assign(&step.anchor_features.t_matmul(&d_combined)?)?;
    let mut d_anchor = d_combined.matmul_t(&weights.prm_anchor_proj)?;
    let d_packed =
        weights.prm_pred_proj.backward(&cache.packed, &d_combined, &mut grads.prm_pred_proj)?;
    let mut d_raw_probs = Matrix::zeros(raw.len(), 2);
    for i in 0..raw.len() {
        let row = d_packed.row(i);
        d_raw_probs.row_mut(i).copy_from_slice(&row[..2]);
        for (d, s) in d_raw_offsets.row_mut(i).iter_mut().zip(&row[2..]) {
            *d += s;
        }
    }
    d_raw_logits.add_assign(&softmax_backward_rows(&raw.probs, &d_raw_probs))?;

    // heads
    d_anchor.add_assign(&weights.cls_head.backward(
        &step.anchor_features,
        &d_raw_logits,
        &mut grads.cls_head,
    )?)?;
    d_anchor.add_assign(&weights.reg_head.backward(
        &step.anchor_features,
        &d_raw_offsets,
        &mut grads.reg_head,
    )?)?;
    d_anchor.add_assign(&dout.anchor_features)?;

    // anchor decoder
    let mut d_fused = Matrix::zeros(cache.fused.rows(), cache.fused.cols());
    for l in (0..weights.decoder.len()).rev() {
        let (da, dmem) = weights.decoder[l].backward(
            &cache.decoder[l],
            &d_anchor,
            &mut grads.decoder[l],
            Some(&mut grads.anchor_bias[l]),
        )?;
        d_anchor = da;
        d_fused.add_assign(&dmem)?;
    }
    grads.anchor_embed.add_assign(&d_anchor)?;

    // memory blocks
    let mut dx = d_fused;
    for b in (0..weights.memory.len()).rev() {
        let block = &weights.memory[b];
        let bc = &cache.memory[b];
        let gb = &mut grads.memory[b];
        let mut dh = dx.clone();
        dh.add_assign(&block.ffn.backward(&bc.ffn, &dx, &mut gb.ffn)?)?;
        let mut dprev = dh.clone();
        dprev.add_assign(&block.mixer.backward(&bc.mixer, &dh, &mut gb.mixer)?)?;
        dx = dprev;
    }

    // fusion decoder
    let mut d_tokens = Matrix::zeros(query.tokens.rows(), query.tokens.cols());
    for l in (0..weights.fusion.len()).rev() {
        let (dv, dq) =
            weights.fusion[l].backward(&cache.fusion[l], &dx, &mut grads.fusion[l], None)?;
        dx = dv;
        d_tokens.add_assign(&dq)?;
    }

    let raw_window = cache
        .window
        .raw
        .as_ref()
        .ok_or_else(|| Error::Usage("backward needs raw window features".into()))?;
    weights.video_proj.backward(raw_window, &dx, &mut grads.video_proj)?;
    assemble_backward(weights, query, &d_tokens, grads)
}

/// Applies predicted offsets to the anchor `(t - length, t)`: `e = t + length * do`,
/// `s = e - length * exp(dl)`.
pub fn anchor_to_interval(t: f64, length: f64, dl: f64, d_o: f64) -> Result<(f64, f64)> {
    if !(length > 0.0) {
        return Err(Error::Config(format!("anchor length must be positive, got {length}")));
    }
    if !dl.is_finite() || !d_o.is_finite() {
        return Err(Error::numeric(format!("anchor offsets dl = {dl}, do = {d_o}")));
    }
    let e = t + length * d_o;
    let s = e - length * dl.exp();
    if !s.is_finite() || !e.is_finite() {
        return Err(Error::numeric(format!("anchor boundary ({s}, {e})")));
    }
    Ok((s, e))
}

/// Inverse of [`anchor_to_interval`]: the offsets `(dl, do)` that map the anchor onto
/// `(s, e)`.
pub fn interval_to_offsets(t: f64, length: f64, s: f64, e: f64) -> Result<(f64, f64)> {
    if !(length > 0.0) {
        return Err(Error::Config(format!("anchor length must be positive, got {length}")));
    }
    if !(e > s) {
        return Err(Error::Validation(format!("interval ({s}, {e}) is empty")));
    }
    Ok((((e - s) / length).ln(), (e - t) / length))
}

/// A selected moment before it enters the emission log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub s: f64,
    pub e: f64,
    pub score: f64,
    pub anchor: usize,
}

/// Anchors with `s_f > theta`, mapped to intervals and clamped to
/// `[0, t + length]`. Intervals that collapse under clamping are dropped.
pub fn select_predictions(
    refined: &RefinedPrediction,
    t: f64,
    anchors: &AnchorConfig,
    snippet_seconds: f64,
    theta: f64,
) -> Result<Vec<Prediction>> {
    let lengths = anchors.lengths_seconds(snippet_seconds);
    if lengths.len() != refined.len() {
        return Err(Error::Config(format!(
            "{} anchors configured, prediction has {}",
            lengths.len(),
            refined.len()
        )));
    }
    let mut out = Vec::new();
    for (n, &len) in lengths.iter().enumerate() {
        let score = refined.foreground(n);
        if !(score > theta) {
            continue;
        }
        let (s, e) = anchor_to_interval(t, len, refined.length_offset(n), refined.end_offset(n))?;
        let e = e.min(t + len);
        let s = s.max(0.0);
        if s < e {
            out.push(Prediction { s, e, score, anchor: n });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MixerKind, ModelConfig};
    use crate::numerics::{check_gradient, finite_diff_grad, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
    use crate::params::{self, ParamVisit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(mixer: MixerKind) -> ModelConfig {
        ModelConfig {
            video_dim: 3,
            query_dims: [3, 2, 3],
            model_dim: 4,
            ffn_dim: 4,
            window: 4,
            anchors: AnchorConfig { count: 2, longest: 2 },
            fusion_layers: 1,
            memory_blocks: 1,
            decoder_layers: 2,
            mixer,
            ..ModelConfig::default()
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn perturb(weights: &mut ModelWeights, rng: &mut ChaCha8Rng) {
        weights.visit_mut("", &mut |_, m| {
            for x in m.as_mut_slice() {
                *x += rng.random_range(-0.3..0.3);
            }
        });
    }

    fn bundle(rng: &mut ChaCha8Rng) -> QueryBundle {
        QueryBundle::new(vec![
            (Modality::Segment, random_matrix(2, 3, rng)),
            (Modality::Text, random_matrix(1, 3, rng)),
        ])
        .unwrap()
    }

    fn window(weights: &ModelWeights, rng: &mut ChaCha8Rng, t: f64) -> WindowFeatures {
        let mut raw = random_matrix(4, 3, rng);
        raw.row_mut(0).fill(0.0);
        WindowFeatures::project(weights, raw, vec![false, true, true, true], t).unwrap()
    }

    /// Scalar loss touching every output; returns value and output gradients.
    fn probe_loss(step: &StepForward, coef: &[Matrix; 3]) -> (f64, OutputGrads) {
        let mut v = 0.0;
        let outs = [&step.refined.probs, &step.refined.offsets, &step.anchor_features];
        for (o, c) in outs.iter().zip(coef) {
            v += o.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        }
        let grads = OutputGrads {
            refined_probs: coef[0].clone(),
            refined_offsets: coef[1].clone(),
            anchor_features: coef[2].clone(),
        };
        (v, grads)
    }

    fn gradient_check(mixer: MixerKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = small_config(mixer);
        let mut weights = ModelWeights::init(&config, 3).unwrap();
        perturb(&mut weights, &mut rng);
        let query_bundle = bundle(&mut rng);
        let mut session = ModelSession::new(&weights, 1);
        // two warm-up steps so memory is non-trivial
        for t in [2.0, 4.0] {
            let q = assemble_query(&weights, &query_bundle).unwrap();
            let w = window(&weights, &mut rng, t);
            forward_step(&weights, &q, &w, StepMemory::Live(&mut session), false).unwrap();
        }
        let raw = window(&weights, &mut rng, 6.0).raw.unwrap();
        let mask = vec![false, true, true, true];
        let q = assemble_query(&weights, &query_bundle).unwrap();
        let w = WindowFeatures::project(&weights, raw.clone(), mask.clone(), 6.0).unwrap();
        let step = forward_step(&weights, &q, &w, StepMemory::Live(&mut session), true).unwrap();
        let n = config.anchors.count;
        let coef = [
            random_matrix(n, 2, &mut rng),
            random_matrix(n, 2, &mut rng),
            random_matrix(n, config.model_dim, &mut rng),
        ];
        let (_, dout) = probe_loss(&step, &coef);
        let mut grads = weights.zeros_like();
        model_backward(&weights, &q, &step, &dout, &mut grads).unwrap();

        let snapshots = step.snapshots.clone();
        let flat = params::flatten(&weights);
        let numeric = finite_diff_grad(
            |p| {
                let mut w2 = weights.clone();
                let mut i = 0;
                w2.visit_mut("", &mut |_, m| {
                    let len = m.len();
                    m.as_mut_slice().copy_from_slice(&p[i..i + len]);
                    i += len;
                });
                let q2 = assemble_query(&w2, &query_bundle)?;
                let win = WindowFeatures::project(&w2, raw.clone(), mask.clone(), 6.0)?;
                let s = forward_step(&w2, &q2, &win, StepMemory::Replay(&snapshots), false)?;
                Ok(probe_loss(&s, &coef).0)
            },
            &flat,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        let analytic = params::flatten(&grads);
        let report = check_gradient(&analytic, &numeric, GRAD_CHECK_TOL);
        assert!(report.passed, "{mixer:?}: max rel error {}", report.max_rel_error);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        gradient_check(MixerKind::Pml);
    }

    #[test]
    fn recurrent_variant_gradient_matches_finite_differences() {
        gradient_check(MixerKind::Recurrent);
    }

    #[test]
    fn attention_variant_gradient_matches_finite_differences() {
        gradient_check(MixerKind::WindowAttention);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = small_config(MixerKind::Pml);
        let weights = ModelWeights::init(&config, 1).unwrap();
        let q = assemble_query(&weights, &bundle(&mut rng)).unwrap();
        let w = window(&weights, &mut rng, 2.0);
        let mut session = ModelSession::new(&weights, 0);
        let step = forward_step(&weights, &q, &w, StepMemory::Live(&mut session), true).unwrap();
        let mut grads = weights.zeros_like();
        model_backward(&weights, &q, &step, &OutputGrads::zeros(2, 4), &mut grads).unwrap();
        assert_eq!(params::global_norm(&grads), 0.0);
    }

    #[test]
    fn backward_without_cache_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = ModelWeights::init(&small_config(MixerKind::Pml), 1).unwrap();
        let q = assemble_query(&weights, &bundle(&mut rng)).unwrap();
        let w = window(&weights, &mut rng, 2.0);
        let mut session = ModelSession::new(&weights, 0);
        let step = forward_step(&weights, &q, &w, StepMemory::Live(&mut session), false).unwrap();
        let mut grads = weights.zeros_like();
        let err = model_backward(&weights, &q, &step, &OutputGrads::zeros(2, 4), &mut grads);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn anchor_embeddings_get_gradient_from_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = ModelWeights::init(&small_config(MixerKind::Pml), 2).unwrap();
        let q = assemble_query(&weights, &bundle(&mut rng)).unwrap();
        let w = window(&weights, &mut rng, 2.0);
        let mut session = ModelSession::new(&weights, 0);
        let step = forward_step(&weights, &q, &w, StepMemory::Live(&mut session), true).unwrap();
        let mut dout = OutputGrads::zeros(2, 4);
        dout.refined_probs.set(0, 0, -1.0);
        let mut grads = weights.zeros_like();
        model_backward(&weights, &q, &step, &dout, &mut grads).unwrap();
        assert!(grads.anchor_embed.max_abs() > 0.0);
        // write-path parameters stay untouched
        if let crate::model::Mixer::Pml(g) = &grads.memory[0].mixer {
            assert_eq!(g.w_k.max_abs(), 0.0);
            assert_eq!(g.w_v.max_abs(), 0.0);
            assert_eq!(g.w_lr.max_abs(), 0.0);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights = ModelWeights::init(&small_config(MixerKind::Pml), 5).unwrap();
        let q = assemble_query(&weights, &bundle(&mut rng)).unwrap();
        let mut session = ModelSession::new(&weights, 0);
        for t in [2.0, 4.0, 6.0] {
            let w = window(&weights, &mut rng, t);
            let s = forward_step(&weights, &q, &w, StepMemory::Live(&mut session), false).unwrap();
            for p in [&s.raw, &s.refined] {
                for i in 0..p.len() {
                    assert!((p.foreground(i) + p.background(i) - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn modality_order_is_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights = ModelWeights::init(&small_config(MixerKind::Pml), 5).unwrap();
        let text = random_matrix(1, 3, &mut rng);
        let seg = random_matrix(2, 3, &mut rng);
        let a = QueryBundle::new(vec![(Modality::Text, text.clone()), (Modality::Segment, seg.clone())])
            .unwrap();
        let b = QueryBundle::new(vec![(Modality::Segment, seg), (Modality::Text, text)]).unwrap();
        let qa = assemble_query(&weights, &a).unwrap();
        let qb = assemble_query(&weights, &b).unwrap();
        assert_eq!(qa.tokens, qb.tokens);
        assert_eq!(qa.tokens.row(0), weights.modality_tokens.row(Modality::Text.index()));
    }

    #[test]
    fn missing_modality_projection_is_config_error() {
        let mut config = small_config(MixerKind::Pml);
        config.modalities = vec![Modality::Text];
        let weights = ModelWeights::init(&config, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = assemble_query(&weights, &bundle(&mut rng));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn padded_rows_do_not_influence_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [MixerKind::Pml, MixerKind::Recurrent, MixerKind::WindowAttention] {
            let weights = ModelWeights::init(&small_config(kind), 5).unwrap();
            let q = assemble_query(&weights, &bundle(&mut rng)).unwrap();
            let base = window(&weights, &mut rng, 6.0).raw.unwrap();
            let mut noisy = base.clone();
            noisy.row_mut(0).copy_from_slice(&[5.0, -3.0, 2.0]);
            let mask = vec![false, true, true, true];
            let run = |raw: Matrix| {
                let mut session = ModelSession::new(&weights, 0);
                let w = WindowFeatures::project(&weights, raw, mask.clone(), 6.0).unwrap();
                forward_step(&weights, &q, &w, StepMemory::Live(&mut session), false).unwrap()
            };
            let a = run(base);
            let b = run(noisy);
            assert_eq!(a.refined, b.refined, "{kind:?}");
            assert_eq!(a.anchor_features, b.anchor_features);
        }
    }

    #[test]
    fn zero_value_projection_makes_anchors_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut weights = ModelWeights::init(&small_config(MixerKind::Pml), 5).unwrap();
        let row = weights.anchor_embed.row(0).to_vec();
        for i in 0..weights.anchor_embed.rows() {
            weights.anchor_embed.row_mut(i).copy_from_slice(&row);
        }
        for layer in &mut weights.decoder {
            layer.attn.w_v.fill(0.0);
        }
        let fused = random_matrix(4, 4, &mut rng);
        let (_, raw) = decode_anchors(&weights, &fused, &[true; 4]).unwrap();
        assert_eq!(raw.probs.row(0), raw.probs.row(1));
        assert_eq!(raw.offsets.row(0), raw.offsets.row(1));
    }

    #[test]
    fn fuse_mutates_only_fusion_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut config = small_config(MixerKind::Pml);
        config.model_dim = 8;
        config.ffn_dim = 8;
        config.window = 16;
        config.anchors = AnchorConfig::default();
        let weights = ModelWeights::init(&config, 5).unwrap();
        let q = assemble_query(&weights, &bundle(&mut rng)).unwrap();
        let raw = random_matrix(16, 3, &mut rng);
        let w = WindowFeatures::project(&weights, raw, vec![true; 16], 32.0).unwrap();
        let mut session = ModelSession::new(&weights, 4);
        let before = session.clone();
        let fused = fuse(&weights, &q, &w, &mut session, 4).unwrap();
        assert_eq!(fused.shape(), (16, 8));
        assert!(fused.is_finite());
        assert_ne!(session.fusion, before.fusion);
        assert_eq!(session.prm, before.prm);
    }

    #[test]
    fn refine_rejects_foreign_session() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let weights = ModelWeights::init(&small_config(MixerKind::Pml), 5).unwrap();
        let fused = random_matrix(4, 4, &mut rng);
        let (fa, raw) = decode_anchors(&weights, &fused, &[true; 4]).unwrap();
        let mut session = ModelSession::new(&weights, 1);
        assert!(matches!(
            refine(&weights, &mut session, 2, &fa, &raw),
            Err(Error::Usage(_))
        ));
        let refined = refine(&weights, &mut session, 1, &fa, &raw).unwrap();
        for i in 0..refined.len() {
            assert!((refined.foreground(i) + refined.background(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_on_fresh_memory_depends_only_on_current_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let weights = ModelWeights::init(&small_config(MixerKind::Pml), 5).unwrap();
        let f1 = random_matrix(4, 4, &mut rng);
        let f2 = random_matrix(4, 4, &mut rng);
        let (fa1, raw1) = decode_anchors(&weights, &f1, &[true; 4]).unwrap();
        let (fa2, raw2) = decode_anchors(&weights, &f2, &[true; 4]).unwrap();
        let mut warm = ModelSession::new(&weights, 1);
        refine(&weights, &mut warm, 1, &fa1, &raw1).unwrap();
        let after_history = refine(&weights, &mut warm, 1, &fa2, &raw2).unwrap();
        warm.reset();
        let after_reset = refine(&weights, &mut warm, 1, &fa2, &raw2).unwrap();
        let mut fresh = ModelSession::new(&weights, 1);
        let direct = refine(&weights, &mut fresh, 1, &fa2, &raw2).unwrap();
        assert_eq!(after_reset, direct);
        assert_ne!(after_history, direct);
    }

    #[test]
    fn anchor_interval_examples() {
        assert_eq!(anchor_to_interval(10.0, 4.0, 0.0, 0.0).unwrap(), (6.0, 10.0));
        let (s, e) = anchor_to_interval(10.0, 4.0, 2f64.ln(), 0.25).unwrap();
        assert!((e - 11.0).abs() < 1e-12);
        assert!((s - 3.0).abs() < 1e-12);
        let (dl, d_o) = interval_to_offsets(10.0, 4.0, 3.0, 11.0).unwrap();
        let (s2, e2) = anchor_to_interval(10.0, 4.0, dl, d_o).unwrap();
        assert!((s2 - 3.0).abs() < 1e-9 && (e2 - 11.0).abs() < 1e-9);
        assert!(matches!(anchor_to_interval(1.0, 1.0, f64::NAN, 0.0), Err(Error::Numeric { .. })));
    }

    fn refined_with(fg: &[f64]) -> RefinedPrediction {
        let n = fg.len();
        let mut logits = Matrix::zeros(n, 2);
        for (i, &p) in fg.iter().enumerate() {
            logits.set(i, 0, (p / (1.0 - p)).ln());
        }
        AnchorPrediction::from_logits(logits, Matrix::zeros(n, 2))
    }

    #[test]
    fn selection_examples() {
        let anchors = AnchorConfig::default();
        let r = refined_with(&[0.7, 0.2, 0.3, 0.1]);
        assert!(select_predictions(&r, 20.0, &anchors, 2.0, 1.0).unwrap().is_empty());
        let picked = select_predictions(&r, 20.0, &anchors, 2.0, 0.5).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!((picked[0].s, picked[0].e), (4.0, 20.0));
        assert!((picked[0].score - 0.7).abs() < 1e-12);
        let all = select_predictions(&r, 20.0, &anchors, 2.0, 0.0).unwrap();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn selection_clamps_to_stream_start_and_lookahead() {
        let anchors = AnchorConfig { count: 1, longest: 2 };
        let mut r = refined_with(&[0.9]);
        r.offsets.set(0, 0, 3.0);
        r.offsets.set(0, 1, 5.0);
        let p = select_predictions(&r, 4.0, &anchors, 2.0, 0.5).unwrap();
        assert_eq!((p[0].s, p[0].e), (0.0, 8.0));
        // an interval entirely in the far future collapses and is dropped
        r.offsets.set(0, 0, -3.0);
        assert!(select_predictions(&r, 4.0, &anchors, 2.0, 0.5).unwrap().is_empty());
    }
}
