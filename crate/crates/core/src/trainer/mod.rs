//! Expert and student training.
//!
//! Each training sample is one video streamed snippet by snippet from a fresh memory
//! state. Every step runs the full model (memory writes included), computes the loss on
//! the refined outputs against targets at that stream time, and backpropagates through
//! the step. Gradients are averaged over the steps of a sample and the samples of a
//! batch, clipped, and applied with AdamW.

mod checkpoint;
mod optim;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::losses::{anchor_targets, step_loss, LossBreakdown, LossConfig, TeacherOutputs};
use crate::model::{
    assemble_query, forward_step, model_backward, Modality, ModelConfig, ModelSession,
    ModelWeights, QueryBundle, QueryKind, StepMemory, WindowFeatures,
};
use crate::numerics::Matrix;
use crate::params;

pub use checkpoint::{
    config_difference, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CheckpointMeta, Role, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};

/// Query group of a student batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QueryGroup {
    Text,
    /// Image or segment, chosen uniformly per sample.
    Vision,
    /// Text with one vision modality, chosen uniformly per sample.
    VisionText,
}

impl fmt::Display for QueryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryGroup::Text => "text",
            QueryGroup::Vision => "vision",
            QueryGroup::VisionText => "vision+text",
        })
    }
}

impl FromStr for QueryGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(QueryGroup::Text),
            "vision" => Ok(QueryGroup::Vision),
            "vision+text" | "text+vision" => Ok(QueryGroup::VisionText),
            other => Err(Error::Config(format!("unknown query group '{other}'"))),
        }
    }
}

impl TryFrom<String> for QueryGroup {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QueryGroup> for String {
    fn from(g: QueryGroup) -> String {
        g.to_string()
    }
}

impl QueryGroup {
    /// The concrete query kind of one sample; `coin` picks the vision modality.
    pub fn kind(self, coin: bool) -> QueryKind {
        let vision = if coin { Modality::Image } else { Modality::Segment };
        match self {
            QueryGroup::Text => QueryKind::single(Modality::Text),
            QueryGroup::Vision => QueryKind::single(vision),
            QueryGroup::VisionText => {
                QueryKind::new(vec![Modality::Text, vision]).expect("two modalities")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Student batches cycle through these groups.
    pub query_schedule: Vec<QueryGroup>,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            query_schedule: vec![QueryGroup::Text, QueryGroup::Vision, QueryGroup::VisionText],
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if self.query_schedule.is_empty() {
            return Err(Error::Config("train.query_schedule must not be empty".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Group of every batch in order (all `None` for the expert).
    pub batch_groups: Vec<Option<QueryGroup>>,
}

/// Loss and gradient of streaming one sample.
struct SampleResult {
    grads: ModelWeights,
    loss: LossBreakdown,
    steps: usize,
}

struct Teacher<'a> {
    weights: &'a ModelWeights,
    query: QueryBundle,
}

fn check_dataset(data: &Dataset, config: &ModelConfig, needed: &[Modality]) -> Result<()> {
    let d = data.spec.feature_dim;
    if config.video_dim != d {
        return Err(Error::Config(format!(
            "model.video_dim {} does not match dataset feature_dim {d}",
            config.video_dim
        )));
    }
    if (config.snippet_seconds - data.spec.snippet_seconds).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "model.snippet_seconds {} does not match dataset snippet_seconds {}",
            config.snippet_seconds, data.spec.snippet_seconds
        )));
    }
    if data.records.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for &m in needed {
        if config.query_dims[m.index()] != d {
            return Err(Error::Config(format!(
                "model.query_dims[{m}] = {} does not match dataset feature_dim {d}",
                config.query_dims[m.index()]
            )));
        }
        if !config.modalities.contains(&m) {
            return Err(Error::Config(format!("model.modalities lacks {m}")));
        }
        if let Some(r) = data.records.iter().find(|r| !r.has(m)) {
            return Err(Error::Config(format!(
                "training requires {m} queries, record {} has none",
                r.video_id
            )));
        }
    }
    Ok(())
}

/// Streams one record and returns the step-averaged loss and gradient.
fn sample_gradient(
    weights: &ModelWeights,
    record: &DatasetRecord,
    query: &QueryBundle,
    teacher: Option<&Teacher<'_>>,
    loss_cfg: &LossConfig,
    stream_id: u64,
) -> Result<SampleResult> {
    let config = &weights.config;
    let k = config.window;
    let anchor_seconds = config.anchor_seconds();
    let assembled = assemble_query(weights, query)?;
    let mut session = ModelSession::new(weights, stream_id);
    let teacher_state = match teacher {
        Some(t) => Some((assemble_query(t.weights, &t.query)?, ModelSession::new(t.weights, stream_id))),
        None => None,
    };
    let mut teacher_state = teacher_state;
    let mut grads = weights.zeros_like();
    let mut loss = LossBreakdown::default();
    let mut recent: VecDeque<&[f64]> = VecDeque::with_capacity(k);
    let steps = record.features.rows();
    for i in 0..steps {
        recent.push_back(record.features.row(i));
        if recent.len() > k {
            recent.pop_front();
        }
        let pad = k - recent.len();
        let mut raw = Matrix::zeros(k, config.video_dim);
        let mut mask = vec![false; k];
        for (j, row) in recent.iter().enumerate() {
            raw.row_mut(pad + j).copy_from_slice(row);
            mask[pad + j] = true;
        }
        let t = (i + 1) as f64 * config.snippet_seconds;
        let teacher_out = match (&mut teacher_state, teacher) {
            (Some((tq, ts)), Some(tw)) => {
                let window = WindowFeatures::project(tw.weights, raw.clone(), mask.clone(), t)?;
                Some(forward_step(tw.weights, tq, &window, StepMemory::Live(ts), false)?)
            }
            _ => None,
        };
        let window = WindowFeatures::project(weights, raw, mask, t)?;
        let step = forward_step(weights, &assembled, &window, StepMemory::Live(&mut session), true)?;
        let targets =
            anchor_targets(t, &anchor_seconds, &record.moments, loss_cfg.pos_iou_threshold)?;
        let teacher_view = teacher_out
            .as_ref()
            .map(|s| TeacherOutputs { anchor_features: &s.anchor_features, refined: &s.refined });
        let (l, dout) =
            step_loss(loss_cfg, &step.anchor_features, &step.refined, &targets, teacher_view)?;
        loss.accumulate(&l);
        model_backward(weights, &assembled, &step, &dout, &mut grads)?;
    }
    let scale = 1.0 / steps.max(1) as f64;
    params::scale(&mut grads, scale);
    Ok(SampleResult { grads, loss: loss.scaled(scale), steps })
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A batch plan entry: record index and query kind.
type Planned = (usize, QueryKind);

fn run_training(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    loss_cfg: &LossConfig,
    teacher: Option<(&ModelWeights, bool)>,
    mut plan_batch: impl FnMut(usize, &[usize], &mut ChaCha8Rng) -> (Option<QueryGroup>, Vec<Planned>),
) -> Result<(ModelWeights, Vec<LossBreakdown>, Vec<Option<QueryGroup>>)> {
    let mut weights = ModelWeights::init(model_cfg, train.seed)?;
    let mut opt = AdamW::new(AdamWConfig::new(train.learning_rate, train.weight_decay), &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(train.seed, 0x7472_6169_6e));
    let mut history = Vec::with_capacity(train.epochs);
    let mut groups = Vec::new();
    let mut order: Vec<usize> = (0..data.records.len()).collect();
    let mut batch_index = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let (group, plan) = plan_batch(batch_index, chunk, &mut rng);
            batch_index += 1;
            groups.push(group);
            let w = &weights;
            let results: Vec<SampleResult> = plan
                .par_iter()
                .map(|(idx, kind)| {
                    let record = &data.records[*idx];
                    let query = record.query_bundle(kind, data.spec.segment_len)?;
                    let teacher = match teacher {
                        Some((tw, _)) => Some(Teacher {
                            weights: tw,
                            query: record.query_bundle(&expert_kind(), data.spec.segment_len)?,
                        }),
                        None => None,
                    };
                    sample_gradient(w, record, &query, teacher.as_ref(), loss_cfg, *idx as u64)
                })
                .collect::<Result<_>>()?;
            let mut grads = weights.zeros_like();
            let inv = 1.0 / results.len() as f64;
            for r in &results {
                params::axpy(&mut grads, inv, &r.grads);
                epoch_loss.accumulate(&r.loss.scaled(r.steps as f64));
                epoch_steps += r.steps;
            }
            clip_global_norm(&mut grads, train.clip_norm);
            opt.step(&mut weights, &grads)?;
        }
        let mean = epoch_loss.scaled(1.0 / epoch_steps.max(1) as f64);
        log::info!(
            "epoch {}/{}: loss {:.6} (distill {:.6}, cls {:.6}, reg {:.6})",
            epoch + 1,
            train.epochs,
            mean.total,
            mean.distill,
            mean.cls,
            mean.reg
        );
        if !mean.total.is_finite() {
            return Err(Error::numeric(format!("training loss in epoch {}", epoch + 1)));
        }
        history.push(mean);
    }
    Ok((weights, history, groups))
}

/// The teacher's query kind.
pub fn expert_kind() -> QueryKind {
    QueryKind::new(vec![Modality::Text, Modality::Segment]).expect("two modalities")
}

/// Trains the expert on text+segment queries without distillation.
pub fn train_expert(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train.validate()?;
    loss_cfg.validate()?;
    check_dataset(data, model_cfg, &[Modality::Text, Modality::Segment])?;
    let kind = expert_kind();
    let (weights, history, batch_groups) =
        run_training(data, model_cfg, train, loss_cfg, None, |_, chunk, _| {
            (None, chunk.iter().map(|&i| (i, kind.clone())).collect())
        })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                role: Role::Expert,
                epochs: train.epochs,
                seed: train.seed,
                weights_hash: weights.content_hash(),
                teacher_hash: None,
            },
            weights,
            loss: loss_cfg.clone(),
            train: train.clone(),
            history,
        },
        batch_groups,
    })
}

/// Trains the unified student. With a teacher, every step adds the distillation loss
/// against the teacher's outputs for the same sample under a text+segment query; the
/// teacher is read-only. Without a teacher, the student trains on the task losses alone.
pub fn train_student(
    data: &Dataset,
    teacher: Option<&Checkpoint>,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train.validate()?;
    loss_cfg.validate()?;
    let mut needed = vec![Modality::Text];
    for g in &train.query_schedule {
        if *g != QueryGroup::Text {
            needed.extend([Modality::Image, Modality::Segment]);
        }
    }
    needed.sort();
    needed.dedup();
    check_dataset(data, model_cfg, &needed)?;
    if let Some(t) = teacher {
        let tc = &t.weights.config;
        for (field, a, b) in [
            ("video_dim", tc.video_dim, model_cfg.video_dim),
            ("model_dim", tc.model_dim, model_cfg.model_dim),
            ("window", tc.window, model_cfg.window),
            ("anchors.count", tc.anchors.count, model_cfg.anchors.count),
            ("anchors.longest", tc.anchors.longest, model_cfg.anchors.longest),
        ] {
            if a != b {
                return Err(Error::Config(format!(
                    "teacher model.{field} = {a} does not match student {b}"
                )));
            }
        }
        if (tc.snippet_seconds - model_cfg.snippet_seconds).abs() > 1e-12 {
            return Err(Error::Config("teacher model.snippet_seconds does not match student".into()));
        }
        check_dataset(data, tc, &[Modality::Text, Modality::Segment])?;
    }
    let teacher_hash = teacher.map(|t| t.weights.content_hash());
    let schedule = train.query_schedule.clone();
    let (weights, history, batch_groups) = run_training(
        data,
        model_cfg,
        train,
        loss_cfg,
        teacher.map(|t| (&t.weights, true)),
        |b, chunk, rng| {
            let group = schedule[b % schedule.len()];
            let plan = chunk.iter().map(|&i| (i, group.kind(rng.random_bool(0.5)))).collect();
            (Some(group), plan)
        },
    )?;
    if let (Some(t), Some(h)) = (teacher, &teacher_hash) {
        if &t.weights.content_hash() != h {
            return Err(Error::numeric("teacher weights changed during distillation"));
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                role: Role::Student,
                epochs: train.epochs,
                seed: train.seed,
                weights_hash: weights.content_hash(),
                teacher_hash,
            },
            weights,
            loss: loss_cfg.clone(),
            train: train.clone(),
            history,
        },
        batch_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, Split, SyntheticSpec};

    fn tiny_data(n: usize) -> Dataset {
        let spec = SyntheticSpec {
            train_videos: n,
            video_len: 16,
            feature_dim: 4,
            moment_len_min: 2,
            moment_len_max: 4,
            segment_len: 2,
            seed: 9,
            ..SyntheticSpec::default()
        };
        generate(&spec, Split::Train).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            video_dim: 4,
            query_dims: [4, 4, 4],
            model_dim: 8,
            ffn_dim: 8,
            window: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 2, learning_rate: 1e-2, seed: 4, ..TrainConfig::default() }
    }

    #[test]
    fn expert_smoke_and_determinism() {
        let data = tiny_data(2);
        let a = train_expert(&data, &tiny_model(), &tiny_train(1), &LossConfig::default()).unwrap();
        assert!(a.checkpoint.history[0].total.is_finite());
        assert_eq!(a.checkpoint.history[0].distill, 0.0);
        let b = train_expert(&data, &tiny_model(), &tiny_train(1), &LossConfig::default()).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn expert_requires_segment_queries() {
        let mut data = tiny_data(2);
        data.records[1].queries.segment = None;
        let err = train_expert(&data, &tiny_model(), &tiny_train(1), &LossConfig::default());
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("segment")));
    }

    #[test]
    fn student_follows_schedule_and_leaves_teacher_alone() {
        let data = tiny_data(6);
        let teacher =
            train_expert(&data, &tiny_model(), &tiny_train(1), &LossConfig::default()).unwrap();
        let before = teacher.checkpoint.weights.content_hash();
        let out = train_student(
            &data,
            Some(&teacher.checkpoint),
            &tiny_model(),
            &tiny_train(2),
            &LossConfig::default(),
        )
        .unwrap();
        use QueryGroup::*;
        let expected: Vec<_> =
            [Text, Vision, VisionText, Text, Vision, VisionText].into_iter().map(Some).collect();
        assert_eq!(out.batch_groups, expected);
        assert_eq!(teacher.checkpoint.weights.content_hash(), before);
        assert!(out.checkpoint.history.iter().all(|h| h.distill > 0.0));
        assert_eq!(out.checkpoint.meta.teacher_hash.as_deref(), Some(before.as_str()));
    }

    #[test]
    fn teacher_dimension_mismatch_is_a_config_error() {
        let data = tiny_data(2);
        let teacher =
            train_expert(&data, &tiny_model(), &tiny_train(1), &LossConfig::default()).unwrap();
        let student = ModelConfig { model_dim: 4, ffn_dim: 4, ..tiny_model() };
        let err = train_student(
            &data,
            Some(&teacher.checkpoint),
            &student,
            &tiny_train(1),
            &LossConfig::default(),
        );
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("model_dim")));
    }

    #[test]
    fn group_kinds() {
        assert_eq!(QueryGroup::Vision.kind(true).to_string(), "image");
        assert_eq!(QueryGroup::VisionText.kind(false).to_string(), "text+segment");
        assert_eq!("vision+text".parse::<QueryGroup>().unwrap(), QueryGroup::VisionText);
    }
}
