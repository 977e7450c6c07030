//! Canned comparisons on synthetic data: learnability against random emission,
//! distillation ablation, tune vs frozen memory, memory-layer ablation and the
//! query-modality matrix.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::metrics::{o_map, o_recall, offline_metrics, DecayConfig, QueryEval};
use crate::model::{AnchorConfig, MixerKind, Modality, ModelConfig, ModelWeights, QueryKind};
use crate::streaming::{
    run_stream, snippets_of, AdaptationMode, EmittedPrediction, StreamConfig, StreamSession,
};
use crate::trainer::{train_expert, train_student, Checkpoint};

/// The reported headline metric: online recall at rank 1 and tIoU 0.5, averaged over
/// the decay thresholds.
pub const HEADLINE_N: usize = 1;
pub const HEADLINE_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    /// Drift rate of the drifting variant of `data`.
    pub drift_rate: f64,
    pub model: ModelConfig,
    pub expert: crate::trainer::TrainConfig,
    pub student: crate::trainer::TrainConfig,
    pub loss: LossConfig,
    pub stream: StreamConfig,
    pub decay: DecayConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = crate::trainer::TrainConfig {
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 8,
            ..crate::trainer::TrainConfig::default()
        };
        Self {
            data: SyntheticSpec::default(),
            drift_rate: 0.02,
            model: ModelConfig::default(),
            expert: train.clone(),
            student: train,
            loss: LossConfig::default(),
            stream: StreamConfig::default(),
            decay: DecayConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.expert.validate()?;
        self.student.validate()?;
        self.loss.validate()?;
        self.stream.validate()?;
        self.decay.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }

    fn spec(&self, seed: u64, drifting: bool) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            drift_rate: if drifting { self.drift_rate } else { 0.0 },
            ..self.data.clone()
        }
    }

    /// Train and eval splits for `seed`.
    pub fn datasets(&self, seed: u64, drifting: bool) -> Result<(Dataset, Dataset)> {
        let spec = self.spec(seed, drifting);
        Ok((generate(&spec, Split::Train)?, generate(&spec, Split::Eval)?))
    }

    fn seeded(&self, train: &crate::trainer::TrainConfig, seed: u64) -> crate::trainer::TrainConfig {
        crate::trainer::TrainConfig { seed, ..train.clone() }
    }
}

/// Streams every eval video with `kind` queries, in parallel, in id order.
pub fn stream_dataset(
    weights: &Arc<ModelWeights>,
    data: &Dataset,
    kind: &QueryKind,
    stream: &StreamConfig,
) -> Result<Vec<QueryEval>> {
    data.records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let query = r.query_bundle(kind, data.spec.segment_len)?;
            let mut session = StreamSession::new(i as u64, weights.clone(), &query, stream.clone())?;
            let predictions = run_stream(&mut session, snippets_of(&r.features))?;
            Ok(QueryEval { query_id: r.video_id.clone(), predictions, moments: r.moments.clone() })
        })
        .collect()
}

/// Emits every anchor interval `(t - L_n, t)` at every step with a uniform random
/// score, keeping those above `theta`.
pub fn random_emissions(
    data: &Dataset,
    anchors: &AnchorConfig,
    theta: f64,
    seed: u64,
) -> Vec<QueryEval> {
    let m = data.spec.snippet_seconds;
    let lengths = anchors.lengths_seconds(m);
    data.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
            let mut predictions = Vec::new();
            for step in 1..=r.features.rows() {
                let t = step as f64 * m;
                for &len in &lengths {
                    let score: f64 = rng.random();
                    if score > theta {
                        let s = (t - len).max(0.0);
                        predictions.push(EmittedPrediction { s, e: t, score, emit_time: t });
                    }
                }
            }
            QueryEval { query_id: r.video_id.clone(), predictions, moments: r.moments.clone() }
        })
        .collect()
}

pub fn headline(evals: &[QueryEval], decay: &DecayConfig) -> Result<f64> {
    Ok(o_recall(evals, HEADLINE_N, HEADLINE_IOU, decay)?.average)
}

/// A printable comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.rows.push((label.into(), values));
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(l, _)| l.len()).chain([5]).max().unwrap_or(5);
        let mut out = format!("{}\n{:width$}", self.title, "");
        for c in &self.columns {
            let _ = write!(out, "  {c:>12}");
        }
        out.push('\n');
        for (label, values) in &self.rows {
            let _ = write!(out, "{label:width$}");
            for v in values {
                let _ = write!(out, "  {v:>12.4}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityResult {
    pub seed: u64,
    pub expert_recall: f64,
    pub random_recall: f64,
    pub expert_offline_r1: f64,
    pub history: Vec<LossBreakdown>,
    /// Wall-clock timings; the only part of the result that varies between runs.
    pub metadata: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl LearnabilityResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new("learnability (oR@1, IoU 0.5)", &["value"]);
        t.push("expert", vec![self.expert_recall]);
        t.push("random emission", vec![self.random_recall]);
        t.push("expert offline R@1", vec![self.expert_offline_r1]);
        t
    }
}

/// Trains the expert on the default data of `cfg.seeds[0]` and compares it with random
/// emission on the eval split.
pub fn learnability(cfg: &ExperimentConfig) -> Result<LearnabilityResult> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let (train, eval) = cfg.datasets(seed, false)?;
    let started = Instant::now();
    let expert = train_expert(&train, &cfg.model, &cfg.seeded(&cfg.expert, seed), &cfg.loss)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let weights = Arc::new(expert.checkpoint.weights);
    let evals = stream_dataset(&weights, &eval, &crate::trainer::expert_kind(), &cfg.stream)?;
    let expert_recall = headline(&evals, &cfg.decay)?;
    let (expert_offline_r1, _) = offline_metrics(&evals, HEADLINE_N, HEADLINE_IOU)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    let random = random_emissions(&eval, &cfg.model.anchors, cfg.stream.theta, seed);
    Ok(LearnabilityResult {
        seed,
        expert_recall,
        random_recall: headline(&random, &cfg.decay)?,
        expert_offline_r1,
        history: expert.checkpoint.history,
        metadata: Timing { train_seconds, eval_seconds },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub label: String,
    pub a: f64,
    pub b: f64,
}

fn paired_table(title: &str, a: &str, b: &str, rows: &[PairedRow]) -> Table {
    let mut t = Table::new(title, &[a, b]);
    for r in rows {
        t.push(format!("seed {} {}", r.seed, r.label), vec![r.a, r.b]);
    }
    t
}

fn train_teacher(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Checkpoint> {
    Ok(train_expert(train, &cfg.model, &cfg.seeded(&cfg.expert, seed), &cfg.loss)?.checkpoint)
}

/// Students with and without distillation, identically seeded; `a` = with, `b` = without,
/// on image-only queries.
pub fn distill_ablation(cfg: &ExperimentConfig) -> Result<(Vec<PairedRow>, Table)> {
    cfg.validate()?;
    let image = QueryKind::single(Modality::Image);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (train, eval) = cfg.datasets(seed, false)?;
        let teacher = train_teacher(cfg, &train, seed)?;
        let student_cfg = cfg.seeded(&cfg.student, seed);
        let with = train_student(&train, Some(&teacher), &cfg.model, &student_cfg, &cfg.loss)?;
        let without = train_student(&train, None, &cfg.model, &student_cfg, &cfg.loss)?;
        let score = |c: Checkpoint| -> Result<f64> {
            let evals = stream_dataset(&Arc::new(c.weights), &eval, &image, &cfg.stream)?;
            headline(&evals, &cfg.decay)
        };
        rows.push(PairedRow {
            seed,
            label: "image".into(),
            a: score(with.checkpoint)?,
            b: score(without.checkpoint)?,
        });
        log::info!("distill_ablation seed {seed}: {:?}", rows.last());
    }
    let table = paired_table("distillation ablation, image queries, oR@1 IoU 0.5", "distill", "no distill", &rows);
    Ok((rows, table))
}

/// Tested modalities of the tune-vs-frozen comparison.
pub fn single_modalities() -> Vec<QueryKind> {
    Modality::ALL.iter().map(|&m| QueryKind::single(m)).collect()
}

/// One distilled student per seed on drifting data, evaluated per single-modality query
/// with memory writes on (`a`) and off (`b`).
pub fn tune_vs_frozen(cfg: &ExperimentConfig) -> Result<(Vec<PairedRow>, Table)> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (train, eval) = cfg.datasets(seed, true)?;
        let teacher = train_teacher(cfg, &train, seed)?;
        let student =
            train_student(&train, Some(&teacher), &cfg.model, &cfg.seeded(&cfg.student, seed), &cfg.loss)?;
        let weights = Arc::new(student.checkpoint.weights);
        for kind in single_modalities() {
            let value = |mode| -> Result<f64> {
                let stream = StreamConfig { mode, ..cfg.stream.clone() };
                headline(&stream_dataset(&weights, &eval, &kind, &stream)?, &cfg.decay)
            };
            let a = value(AdaptationMode::Tune)?;
            let b = value(AdaptationMode::Frozen)?;
            rows.push(PairedRow { seed, label: kind.to_string(), a, b });
        }
        log::info!("tune_vs_frozen seed {seed} done");
    }
    let table = paired_table("tune vs frozen, drifting data, oR@1 IoU 0.5", "tune", "frozen", &rows);
    Ok((rows, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub pml: f64,
    pub recurrent: f64,
    pub window_attention: f64,
}

/// Experts with each sequence-mixing variant on drifting data, text+segment queries.
pub fn memory_ablation(cfg: &ExperimentConfig) -> Result<(Vec<AblationRow>, Table)> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (train, eval) = cfg.datasets(seed, true)?;
        let mut values = Vec::new();
        for mixer in [MixerKind::Pml, MixerKind::Recurrent, MixerKind::WindowAttention] {
            let model = ModelConfig { mixer, ..cfg.model.clone() };
            let ckpt = train_expert(&train, &model, &cfg.seeded(&cfg.expert, seed), &cfg.loss)?;
            let weights = Arc::new(ckpt.checkpoint.weights);
            let evals = stream_dataset(&weights, &eval, &crate::trainer::expert_kind(), &cfg.stream)?;
            values.push(headline(&evals, &cfg.decay)?);
        }
        rows.push(AblationRow { seed, pml: values[0], recurrent: values[1], window_attention: values[2] });
        log::info!("memory_ablation seed {seed}: {:?}", rows.last());
    }
    let mut table = Table::new(
        "memory ablation, drifting data, oR@1 IoU 0.5",
        &["pml", "recurrent", "window-att"],
    );
    for r in &rows {
        table.push(format!("seed {}", r.seed), vec![r.pml, r.recurrent, r.window_attention]);
    }
    Ok((rows, table))
}

/// Every query-modality combination.
pub fn all_query_kinds() -> Vec<QueryKind> {
    let mut out = Vec::new();
    for mask in 1u8..8 {
        let mods: Vec<Modality> =
            Modality::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &m)| m).collect();
        out.push(QueryKind::new(mods).expect("non-empty"));
    }
    out.sort_by_key(|k| (k.modalities().len(), k.to_string()));
    out
}

/// A distilled student evaluated with every query combination (first seed).
pub fn modality_matrix(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let (train, eval) = cfg.datasets(seed, false)?;
    let teacher = train_teacher(cfg, &train, seed)?;
    let student =
        train_student(&train, Some(&teacher), &cfg.model, &cfg.seeded(&cfg.student, seed), &cfg.loss)?;
    let weights = Arc::new(student.checkpoint.weights);
    let mut table = Table::new(
        "query modality matrix (student)",
        &["oR@1 0.5", "omAP 0.5", "R@1 0.5", "mAP 0.5"],
    );
    for kind in all_query_kinds() {
        let evals = stream_dataset(&weights, &eval, &kind, &cfg.stream)?;
        let (r, ap) = offline_metrics(&evals, HEADLINE_N, HEADLINE_IOU)?;
        table.push(
            kind.to_string(),
            vec![
                headline(&evals, &cfg.decay)?,
                o_map(&evals, HEADLINE_IOU, &cfg.decay)?.average,
                r,
                ap,
            ],
        );
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_query_kinds_in_stable_order() {
        let names: Vec<String> = all_query_kinds().iter().map(|k| k.to_string()).collect();
        assert_eq!(names.len(), 7);
        assert_eq!(names[0], "image");
        assert_eq!(names[6], "text+image+segment");
    }

    #[test]
    fn random_emission_is_seeded() {
        let spec = SyntheticSpec { eval_videos: 3, ..SyntheticSpec::default() };
        let data = generate(&spec, Split::Eval).unwrap();
        let a = random_emissions(&data, &AnchorConfig::default(), 0.5, 1);
        let b = random_emissions(&data, &AnchorConfig::default(), 0.5, 1);
        assert_eq!(a, b);
        assert!(a.iter().all(|q| q.predictions.iter().all(|p| p.s < p.e && p.score > 0.5)));
    }

    #[test]
    fn table_renders_every_row() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push("row", vec![0.5, 0.25]);
        let s = t.render();
        assert!(s.contains("0.5000") && s.contains("0.2500"));
    }
}
