//! Timeliness-aware online metrics and their offline counterparts.
//!
//! A prediction's credit is scaled by a decay factor `beta` that is 1 when it was
//! emitted no later than the end of the moment it matches, and falls linearly to 0
//! once the emission lags the moment end by `t_s` seconds.
//!
//! Online AP replaces true-positive counts in precision and recall by sums of `beta`
//! over true positives: with `B_j` the running `beta` sum up to rank `j` and `G` the
//! number of moments, `oAP = sum over TP ranks j of (beta_j / G) * (B_j / j)`. With
//! every `beta = 1` this is exactly the usual non-interpolated AP.

mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streaming::EmittedPrediction;

pub use report::{
    evaluate, read_ground_truth, read_prediction_logs, write_ground_truth, GroundTruthFile,
    MapEntry, MetricGrid, MetricReport, OfflineMapEntry, OfflineRecallEntry, QueryBreakdown,
    QueryGroundTruth, RecallEntry,
};

/// Decay thresholds `t_s` in seconds; decay shape is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecayConfig {
    pub thresholds: Vec<f64>,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { thresholds: vec![1.0, 3.0, 5.0] }
    }
}

impl DecayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("decay.thresholds must not be empty".into()));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config("decay.thresholds must be positive".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("decay.thresholds must be sorted".into()));
        }
        Ok(())
    }
}

/// Linear timeliness decay.
pub fn beta(emit_time: f64, gt_end: f64, t_s: f64) -> f64 {
    if emit_time <= gt_end {
        1.0
    } else if emit_time < gt_end + t_s {
        1.0 - (emit_time - gt_end) / t_s
    } else {
        0.0
    }
}

/// Decay under an optional threshold; `None` disables decay.
fn decay(emit_time: f64, gt_end: f64, t_s: Option<f64>) -> f64 {
    t_s.map_or(1.0, |t| beta(emit_time, gt_end, t))
}

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s < e) || !s.is_finite() || !e.is_finite() {
            return Err(Error::Validation(format!("degenerate interval ({s}, {e})")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    Ok(inter / union)
}

/// Indices of `preds` by score descending, ties by earlier emission, then input order.
pub fn rank(preds: &[EmittedPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .score
            .total_cmp(&preds[i].score)
            .then(preds[i].emit_time.total_cmp(&preds[j].emit_time))
            .then(i.cmp(&j))
    });
    order
}

/// One assignment made while scoring a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub prediction: usize,
    pub gt: Option<usize>,
    pub iou: f64,
    pub beta: f64,
}

/// `beta_i * r_i` for one query: among the top `n` ranked predictions, the largest
/// decay over pairs with IoU above `m`.
pub fn query_recall(
    preds: &[EmittedPrediction],
    gts: &[(f64, f64)],
    n: usize,
    m: f64,
    t_s: Option<f64>,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    for &i in rank(preds).iter().take(n) {
        let p = &preds[i];
        for &g in gts {
            if temporal_iou((p.s, p.e), g)? > m {
                let b = decay(p.emit_time, g.1, t_s);
                best = Some(best.map_or(b, |x: f64| x.max(b)));
            }
        }
    }
    Ok(best.unwrap_or(0.0))
}

/// Greedy matching in rank order; each moment is matched at most once.
pub fn match_query(
    preds: &[EmittedPrediction],
    gts: &[(f64, f64)],
    m: f64,
    t_s: Option<f64>,
) -> Result<Vec<MatchRecord>> {
    let mut matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for i in rank(preds) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, &gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = temporal_iou((p.s, p.e), gt)?;
            if iou > m && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let record = match best {
            Some((g, iou)) => {
                matched[g] = true;
                MatchRecord { prediction: i, gt: Some(g), iou, beta: decay(p.emit_time, gts[g].1, t_s) }
            }
            None => MatchRecord { prediction: i, gt: None, iou: 0.0, beta: 0.0 },
        };
        out.push(record);
    }
    Ok(out)
}

/// Online AP of one query (plain AP when `t_s` is `None`).
pub fn query_ap(
    preds: &[EmittedPrediction],
    gts: &[(f64, f64)],
    m: f64,
    t_s: Option<f64>,
) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Validation("query has no ground-truth moment".into()));
    }
    let g = gts.len() as f64;
    let mut cum = 0.0;
    let mut ap = 0.0;
    for (j, rec) in match_query(preds, gts, m, t_s)?.iter().enumerate() {
        if rec.gt.is_some() {
            cum += rec.beta;
            ap += (rec.beta / g) * (cum / (j + 1) as f64);
        }
    }
    Ok(ap)
}

/// Predictions and moments of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEval {
    pub query_id: String,
    pub predictions: Vec<EmittedPrediction>,
    pub moments: Vec<(f64, f64)>,
}

/// Per-threshold values and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayedValue {
    pub per_threshold: Vec<f64>,
    pub average: f64,
    pub skipped_queries: usize,
}

fn mean_over_queries<F>(queries: &[QueryEval], f: F) -> Result<(f64, usize)>
where
    F: Fn(&QueryEval) -> Result<f64> + Sync,
{
    let values: Vec<Option<f64>> = queries
        .par_iter()
        .map(|q| if q.moments.is_empty() { Ok(None) } else { f(q).map(Some) })
        .collect::<Result<_>>()?;
    let skipped = values.iter().filter(|v| v.is_none()).count();
    let kept: Vec<f64> = values.into_iter().flatten().collect();
    if kept.is_empty() {
        return Ok((0.0, skipped));
    }
    Ok((kept.iter().sum::<f64>() / kept.len() as f64, skipped))
}

fn decayed<F>(queries: &[QueryEval], decay: &DecayConfig, f: F) -> Result<DecayedValue>
where
    F: Fn(&QueryEval, f64) -> Result<f64> + Sync,
{
    let mut per_threshold = Vec::with_capacity(decay.thresholds.len());
    let mut skipped = 0;
    for &t in &decay.thresholds {
        let (v, s) = mean_over_queries(queries, |q| f(q, t))?;
        per_threshold.push(v);
        skipped = s;
    }
    let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(DecayedValue { per_threshold, average, skipped_queries: skipped })
}

/// oR@n,IoU=m for each decay threshold. Queries without moments are skipped and counted.
pub fn o_recall(queries: &[QueryEval], n: usize, m: f64, decay: &DecayConfig) -> Result<DecayedValue> {
    decayed(queries, decay, |q, t| query_recall(&q.predictions, &q.moments, n, m, Some(t)))
}

/// omAP at IoU `m` for each decay threshold.
pub fn o_map(queries: &[QueryEval], m: f64, decay: &DecayConfig) -> Result<DecayedValue> {
    decayed(queries, decay, |q, t| query_ap(&q.predictions, &q.moments, m, Some(t)))
}

/// Offline `(R@n,IoU=m, mAP@m)` with timeliness ignored.
pub fn offline_metrics(queries: &[QueryEval], n: usize, m: f64) -> Result<(f64, f64)> {
    let (r, _) = mean_over_queries(queries, |q| query_recall(&q.predictions, &q.moments, n, m, None))?;
    let (ap, _) = mean_over_queries(queries, |q| query_ap(&q.predictions, &q.moments, m, None))?;
    Ok((r, ap))
}
