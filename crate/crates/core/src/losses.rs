//! Focal classification loss, L1 boundary regression, hybrid distillation and the
//! combined objective. Every loss returns its value together with its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::temporal_iou;
use crate::model::{interval_to_offsets, OutputGrads, RefinedPrediction};
use crate::numerics::{log_softmax, Matrix};

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub kl_temperature: f64,
    pub pos_iou_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.9, gamma: 2.0, lambda: 10.0, kl_temperature: 2.0, pos_iou_threshold: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("loss.alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("loss.lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.kl_temperature > 0.0) {
            return Err(Error::Config(format!(
                "loss.kl_temperature must be > 0, got {}",
                self.kl_temperature
            )));
        }
        if !(self.pos_iou_threshold > 0.0 && self.pos_iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "loss.pos_iou_threshold must be in (0, 1), got {}",
                self.pos_iou_threshold
            )));
        }
        Ok(())
    }
}

/// Per-anchor training targets at one stream step.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub positive: Vec<bool>,
    /// `(dl, do)` towards the matched moment, for positive anchors only.
    pub offsets: Vec<Option<(f64, f64)>>,
}

impl AnchorTargets {
    pub fn positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Matches each anchor `(t - L_n, t)` to the moment with the highest tIoU; anchors
/// above `threshold` become positives with offsets towards that moment.
pub fn anchor_targets(
    t: f64,
    anchor_lengths: &[f64],
    moments: &[(f64, f64)],
    threshold: f64,
) -> Result<AnchorTargets> {
    let mut positive = Vec::with_capacity(anchor_lengths.len());
    let mut offsets = Vec::with_capacity(anchor_lengths.len());
    for &len in anchor_lengths {
        let anchor = (t - len, t);
        let mut best: Option<(f64, (f64, f64))> = None;
        for &m in moments {
            let iou = temporal_iou(anchor, m)?;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, m));
            }
        }
        match best {
            Some((iou, (s, e))) if iou > threshold => {
                positive.push(true);
                offsets.push(Some(interval_to_offsets(t, len, s, e)?));
            }
            _ => {
                positive.push(false);
                offsets.push(None);
            }
        }
    }
    Ok(AnchorTargets { positive, offsets })
}

/// Mean focal loss over anchors and its gradient with respect to `s_f`.
pub fn focal_loss(s_f: &[f64], positive: &[bool], config: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if s_f.len() != positive.len() {
        return Err(Error::dim(
            "focal_loss",
            format!("{} scores for {} targets", s_f.len(), positive.len()),
        ));
    }
    let n = s_f.len().max(1) as f64;
    let (a, g) = (config.alpha, config.gamma);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(s_f.len());
    for (&raw, &pos) in s_f.iter().zip(positive) {
        let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw);
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (value, d) = if pos {
            let q = 1.0 - p;
            let value = -a * q.powf(g) * p.ln();
            let mut d = -a * q.powf(g) / p;
            if g != 0.0 {
                d += a * g * q.powf(g - 1.0) * p.ln();
            }
            (value, d)
        } else {
            let q = 1.0 - p;
            let value = -(1.0 - a) * p.powf(g) * q.ln();
            let mut d = (1.0 - a) * p.powf(g) / q;
            if g != 0.0 {
                d -= (1.0 - a) * g * p.powf(g - 1.0) * q.ln();
            }
            (value, d)
        };
        total += value;
        grad.push(if clamped { 0.0 } else { d / n });
    }
    Ok((total / n, grad))
}

/// Mean L1 distance over positive anchors; `offsets` is `N x 2` with columns `(dl, do)`.
pub fn regression_loss(offsets: &Matrix, targets: &AnchorTargets) -> Result<(f64, Matrix)> {
    if offsets.rows() != targets.offsets.len() || offsets.cols() != 2 {
        return Err(Error::dim(
            "regression_loss",
            format!(
                "offsets {}x{} for {} anchors",
                offsets.rows(),
                offsets.cols(),
                targets.offsets.len()
            ),
        ));
    }
    let mut grad = Matrix::zeros(offsets.rows(), 2);
    let count = targets.positives();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut total = 0.0;
    for (i, target) in targets.offsets.iter().enumerate() {
        let Some((dl, d_o)) = target else { continue };
        for (j, t) in [*dl, *d_o].into_iter().enumerate() {
            let diff = offsets.get(i, j) - t;
            total += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.set(i, j, sign / n);
        }
    }
    Ok((total / n, grad))
}

/// Student-side gradients of the distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationGrads {
    pub anchor_features: Matrix,
    pub offsets: Matrix,
    pub probs: Matrix,
}

/// `(1/N) sum_i [KL(softmax(F_s/T) || softmax(F_t/T)) + MSE(r_s, r_t) + MSE(c_s, c_t)]`.
/// Teacher values are constants.
pub fn distillation_loss(
    student: (&Matrix, &Matrix, &Matrix),
    teacher: (&Matrix, &Matrix, &Matrix),
    temperature: f64,
) -> Result<(f64, DistillationGrads)> {
    let (fs, rs, cs) = student;
    let (ft, rt, ct) = teacher;
    for (name, a, b) in [("anchor features", fs, ft), ("offsets", rs, rt), ("scores", cs, ct)] {
        if !a.same_shape(b) {
            return Err(Error::dim(
                "distillation_loss",
                format!(
                    "student {name} {}x{} vs teacher {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
    }
    if fs.rows() != rs.rows() || fs.rows() != cs.rows() {
        return Err(Error::dim("distillation_loss", "anchor counts differ between outputs"));
    }
    let n = fs.rows() as f64;
    let mut total = 0.0;
    let mut d_fa = Matrix::zeros(fs.rows(), fs.cols());
    for i in 0..fs.rows() {
        let zs: Vec<f64> = fs.row(i).iter().map(|v| v / temperature).collect();
        let zt: Vec<f64> = ft.row(i).iter().map(|v| v / temperature).collect();
        let ls = log_softmax(&zs);
        let lt = log_softmax(&zt);
        let kl: f64 = ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl;
        for (k, d) in d_fa.row_mut(i).iter_mut().enumerate() {
            *d = ls[k].exp() * (ls[k] - lt[k] - kl) / temperature / n;
        }
    }
    let mut mse = |s: &Matrix, t: &Matrix| -> Matrix {
        let c = s.cols() as f64;
        let mut g = Matrix::zeros(s.rows(), s.cols());
        for ((gv, a), b) in g.as_mut_slice().iter_mut().zip(s.as_slice()).zip(t.as_slice()) {
            total += (a - b) * (a - b) / c;
            *gv = 2.0 * (a - b) / c / n;
        }
        g
    };
    let d_r = mse(rs, rt);
    let d_c = mse(cs, ct);
    Ok((total / n, DistillationGrads { anchor_features: d_fa, offsets: d_r, probs: d_c }))
}

/// `L = L_d + lambda * L_cls + L_reg`.
pub fn total_loss(distill: f64, cls: f64, reg: f64, config: &LossConfig) -> f64 {
    distill + config.lambda * cls + reg
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub distill: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.distill += other.distill;
        self.cls += other.cls;
        self.reg += other.reg;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            distill: self.distill * s,
            cls: self.cls * s,
            reg: self.reg * s,
            total: self.total * s,
        }
    }
}

/// Teacher outputs used as distillation targets.
pub struct TeacherOutputs<'a> {
    pub anchor_features: &'a Matrix,
    pub refined: &'a RefinedPrediction,
}

/// Combined loss of one step on the refined outputs, and the gradients that seed the
/// model's backward pass.
pub fn step_loss(
    config: &LossConfig,
    anchor_features: &Matrix,
    refined: &RefinedPrediction,
    targets: &AnchorTargets,
    teacher: Option<TeacherOutputs<'_>>,
) -> Result<(LossBreakdown, OutputGrads)> {
    let n = refined.len();
    let s_f: Vec<f64> = (0..n).map(|i| refined.foreground(i)).collect();
    let (cls, d_sf) = focal_loss(&s_f, &targets.positive, config)?;
    let (reg, d_off) = regression_loss(&refined.offsets, targets)?;
    let mut grads = OutputGrads::zeros(n, anchor_features.cols());
    for (i, d) in d_sf.iter().enumerate() {
        grads.refined_probs.set(i, 0, config.lambda * d);
    }
    grads.refined_offsets.add_assign(&d_off)?;
    let mut distill = 0.0;
    if let Some(t) = teacher {
        let (value, g) = distillation_loss(
            (anchor_features, &refined.offsets, &refined.probs),
            (t.anchor_features, &t.refined.offsets, &t.refined.probs),
            config.kl_temperature,
        )?;
        distill = value;
        grads.anchor_features.add_assign(&g.anchor_features)?;
        grads.refined_offsets.add_assign(&g.offsets)?;
        grads.refined_probs.add_assign(&g.probs)?;
    }
    let total = total_loss(distill, cls, reg, config);
    Ok((LossBreakdown { distill, cls, reg, total }, grads))
}
