//! Metric reports over a metric grid, and the ground-truth / emission-log file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    o_map, o_recall, offline_metrics, query_ap, query_recall, DecayConfig, DecayedValue, QueryEval,
};
use crate::error::{Error, Result};
use crate::streaming::read_emission_log;

/// Which `n` and IoU thresholds to report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricGrid {
    pub recall_at: Vec<usize>,
    pub iou: Vec<f64>,
}

impl Default for MetricGrid {
    fn default() -> Self {
        Self { recall_at: vec![1, 5], iou: vec![0.3, 0.5, 0.7] }
    }
}

impl MetricGrid {
    pub fn validate(&self) -> Result<()> {
        if self.recall_at.is_empty() || self.recall_at.contains(&0) {
            return Err(Error::Config("metrics.recall_at must hold positive ranks".into()));
        }
        if self.iou.is_empty() || self.iou.iter().any(|&m| !(0.0..1.0).contains(&m)) {
            return Err(Error::Config("metrics.iou thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub n: usize,
    pub iou: f64,
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub iou: f64,
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRecallEntry {
    pub n: usize,
    pub iou: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineMapEntry {
    pub iou: f64,
    pub value: f64,
}

/// Per-query values at the grid's first `n` and each IoU, averaged over thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBreakdown {
    pub query_id: String,
    pub predictions: usize,
    pub moments: usize,
    pub recall: Vec<f64>,
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub skipped_queries: usize,
    pub thresholds: Vec<f64>,
    pub online_recall: Vec<RecallEntry>,
    pub online_map: Vec<MapEntry>,
    pub offline_recall: Vec<OfflineRecallEntry>,
    pub offline_map: Vec<OfflineMapEntry>,
    pub per_query: Vec<QueryBreakdown>,
}

impl MetricReport {
    /// Averaged oR@n at IoU `m`, if on the grid.
    pub fn online_recall_at(&self, n: usize, m: f64) -> Option<f64> {
        self.online_recall.iter().find(|e| e.n == n && e.iou == m).map(|e| e.average)
    }

    pub fn online_map_at(&self, m: f64) -> Option<f64> {
        self.online_map.iter().find(|e| e.iou == m).map(|e| e.average)
    }

    pub fn offline_recall_at(&self, n: usize, m: f64) -> Option<f64> {
        self.offline_recall.iter().find(|e| e.n == n && e.iou == m).map(|e| e.value)
    }

    pub fn offline_map_at(&self, m: f64) -> Option<f64> {
        self.offline_map.iter().find(|e| e.iou == m).map(|e| e.value)
    }

    /// Rows `metric,n,iou,t_s,value`; `t_s` is `avg` for averages and `offline` for
    /// undecayed values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,n,iou,t_s,value\n");
        for e in &self.online_recall {
            for (t, v) in self.thresholds.iter().zip(&e.per_threshold) {
                let _ = writeln!(out, "oR,{},{},{},{:.6}", e.n, e.iou, t, v);
            }
            let _ = writeln!(out, "oR,{},{},avg,{:.6}", e.n, e.iou, e.average);
        }
        for e in &self.online_map {
            for (t, v) in self.thresholds.iter().zip(&e.per_threshold) {
                let _ = writeln!(out, "omAP,,{},{},{:.6}", e.iou, t, v);
            }
            let _ = writeln!(out, "omAP,,{},avg,{:.6}", e.iou, e.average);
        }
        for e in &self.offline_recall {
            let _ = writeln!(out, "R,{},{},offline,{:.6}", e.n, e.iou, e.value);
        }
        for e in &self.offline_map {
            let _ = writeln!(out, "mAP,,{},offline,{:.6}", e.iou, e.value);
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

/// Computes every metric on the grid.
pub fn evaluate(queries: &[QueryEval], grid: &MetricGrid, decay: &DecayConfig) -> Result<MetricReport> {
    grid.validate()?;
    decay.validate()?;
    let mut online_recall = Vec::new();
    let mut offline_recall = Vec::new();
    let mut skipped = 0;
    for &n in &grid.recall_at {
        for &m in &grid.iou {
            let DecayedValue { per_threshold, average, skipped_queries } =
                o_recall(queries, n, m, decay)?;
            skipped = skipped_queries;
            online_recall.push(RecallEntry { n, iou: m, per_threshold, average });
            let (r, _) = offline_metrics(queries, n, m)?;
            offline_recall.push(OfflineRecallEntry { n, iou: m, value: r });
        }
    }
    let mut online_map = Vec::new();
    let mut offline_map = Vec::new();
    for &m in &grid.iou {
        let v = o_map(queries, m, decay)?;
        online_map.push(MapEntry { iou: m, per_threshold: v.per_threshold, average: v.average });
        let (_, ap) = offline_metrics(queries, 1, m)?;
        offline_map.push(OfflineMapEntry { iou: m, value: ap });
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without ground-truth moments were skipped");
    }
    let n0 = grid.recall_at[0];
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries.iter().filter(|q| !q.moments.is_empty()) {
        let mut recall = Vec::with_capacity(grid.iou.len());
        let mut ap = Vec::with_capacity(grid.iou.len());
        for &m in &grid.iou {
            let mut r = 0.0;
            let mut a = 0.0;
            for &t in &decay.thresholds {
                r += query_recall(&q.predictions, &q.moments, n0, m, Some(t))?;
                a += query_ap(&q.predictions, &q.moments, m, Some(t))?;
            }
            let k = decay.thresholds.len() as f64;
            recall.push(r / k);
            ap.push(a / k);
        }
        per_query.push(QueryBreakdown {
            query_id: q.query_id.clone(),
            predictions: q.predictions.len(),
            moments: q.moments.len(),
            recall,
            ap,
        });
    }
    Ok(MetricReport {
        queries: queries.len(),
        skipped_queries: skipped,
        thresholds: decay.thresholds.clone(),
        online_recall,
        online_map,
        offline_recall,
        offline_map,
        per_query,
    })
}

/// Ground-truth file: `{"version": 1, "queries": [{"query_id": .., "moments": [[s, e]]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub version: u32,
    pub queries: Vec<QueryGroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroundTruth {
    pub query_id: String,
    pub moments: Vec<(f64, f64)>,
}

pub const GROUND_TRUTH_VERSION: u32 = 1;

pub fn write_ground_truth(path: &Path, gt: &GroundTruthFile) -> Result<()> {
    let json = serde_json::to_string_pretty(gt).expect("ground truth serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let gt: GroundTruthFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    if gt.version != GROUND_TRUTH_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported ground-truth version {}",
            path.display(),
            gt.version
        )));
    }
    for q in &gt.queries {
        for &(s, e) in &q.moments {
            if !(s < e) || !s.is_finite() || !e.is_finite() {
                return Err(Error::Validation(format!(
                    "query '{}' has invalid moment ({s}, {e})",
                    q.query_id
                )));
            }
        }
    }
    Ok(gt)
}

/// Pairs each ground-truth query with the log `<dir>/<query_id>.jsonl`; a missing log
/// means no predictions.
pub fn read_prediction_logs(dir: &Path, gt: &GroundTruthFile) -> Result<Vec<QueryEval>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("log directory {} does not exist", dir.display())));
    }
    gt.queries
        .iter()
        .map(|q| {
            let path = dir.join(format!("{}.jsonl", q.query_id));
            let predictions = if path.exists() { read_emission_log(&path)? } else { Vec::new() };
            Ok(QueryEval { query_id: q.query_id.clone(), predictions, moments: q.moments.clone() })
        })
        .collect()
}
