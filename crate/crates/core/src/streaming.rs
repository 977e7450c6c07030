//! Online inference: a session per stream that consumes one snippet per step, keeps a
//! sliding window of projected snippet features, runs the model with test-time memory
//! writes and appends every above-threshold anchor to an append-only emission log.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    assemble_query, forward_step, project_snippets, select_predictions, AssembledQuery,
    ModelSession, ModelWeights, QueryBundle, StepMemory, WindowFeatures,
};
use crate::numerics::Matrix;

/// An irrevocable prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmittedPrediction {
    pub s: f64,
    pub e: f64,
    pub score: f64,
    pub emit_time: f64,
}

impl EmittedPrediction {
    /// One JSON Lines record with six decimals and fixed field order.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"s\":{:.6},\"e\":{:.6},\"score\":{:.6},\"emit_time\":{:.6}}}",
            self.s, self.e, self.score, self.emit_time
        )
    }
}

#[derive(Debug, Default)]
struct LogInner {
    entries: Vec<EmittedPrediction>,
    chain: Vec<[u8; 32]>,
}

const CHAIN_SEED: &[u8] = b"ovg emission log v1";

fn chain_next(prev: &[u8], entry: &EmittedPrediction) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    for v in [entry.s, entry.e, entry.score, entry.emit_time] {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Append-only list of emissions with a running hash chain. Clones share the same
/// underlying log, so a clone can be handed to a progress reader; only the owning
/// session appends.
#[derive(Debug, Clone, Default)]
pub struct EmissionLog {
    inner: Arc<RwLock<LogInner>>,
}

impl EmissionLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn append(&self, batch: &[EmittedPrediction]) -> Result<()> {
        let mut inner = self.inner.write().expect("emission log lock poisoned");
        let last = inner.entries.last().map_or(f64::NEG_INFINITY, |p| p.emit_time);
        if batch.iter().any(|p| p.emit_time < last) {
            return Err(Error::Protocol("emission times must not decrease".into()));
        }
        for p in batch {
            let prev = inner.chain.last().map_or_else(|| Sha256::digest(CHAIN_SEED).into(), |h| *h);
            let next = chain_next(&prev, p);
            inner.entries.push(*p);
            inner.chain.push(next);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("emission log lock poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the current entries.
    pub fn entries(&self) -> Vec<EmittedPrediction> {
        self.inner.read().expect("emission log lock poisoned").entries.clone()
    }

    /// Hex hash after each entry; a longer log's chain extends a shorter one's.
    pub fn chain(&self) -> Vec<String> {
        let inner = self.inner.read().expect("emission log lock poisoned");
        inner.chain.iter().map(hex::encode).collect()
    }

    /// Hash of the whole log (the seed hash when empty).
    pub fn head(&self) -> String {
        let inner = self.inner.read().expect("emission log lock poisoned");
        inner.chain.last().map_or_else(|| hex::encode(Sha256::digest(CHAIN_SEED)), hex::encode)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in self.entries() {
            let _ = writeln!(out, "{}", p.to_json_line());
        }
        out
    }
}

pub fn write_emission_log(path: &Path, entries: &[EmittedPrediction]) -> Result<()> {
    let mut out = String::new();
    for p in entries {
        let _ = writeln!(out, "{}", p.to_json_line());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_emission_log(path: &Path) -> Result<Vec<EmittedPrediction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: EmittedPrediction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if !(p.s < p.e) {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                detail: format!("empty interval ({}, {})", p.s, p.e),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Whether memory layers are written during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    #[default]
    Tune,
    Frozen,
}

impl std::str::FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tune" => Ok(AdaptationMode::Tune),
            "frozen" => Ok(AdaptationMode::Frozen),
            other => Err(Error::Config(format!("unknown adaptation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    /// Emission threshold on the refined foreground score.
    pub theta: f64,
    /// Reuse projected snippet features across steps.
    pub caching: bool,
    pub mode: AdaptationMode,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { theta: 0.5, caching: true, mode: AdaptationMode::Tune }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("stream.theta must be in [0, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// One snippet of pre-extracted features.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub index: usize,
    pub features: Vec<f64>,
}

/// Feature cache counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub computed: u64,
    pub reused: u64,
    pub last_computed: u64,
    pub last_reused: u64,
}

/// Inference state of one stream.
#[derive(Debug)]
pub struct StreamSession {
    id: u64,
    weights: Arc<ModelWeights>,
    query: AssembledQuery,
    config: StreamConfig,
    raw: VecDeque<Vec<f64>>,
    projected: VecDeque<Vec<f64>>,
    next_index: usize,
    stats: CacheStats,
    model: ModelSession,
    log: EmissionLog,
}

/// Serializable state of a session between two steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: u64,
    pub config: StreamConfig,
    pub raw: Vec<Vec<f64>>,
    pub projected: Vec<Vec<f64>>,
    pub next_index: usize,
    pub stats: CacheStats,
    pub model: ModelSession,
    pub log: Vec<EmittedPrediction>,
}

impl StreamSession {
    pub fn new(
        id: u64,
        weights: Arc<ModelWeights>,
        query: &QueryBundle,
        config: StreamConfig,
    ) -> Result<Self> {
        config.validate()?;
        let assembled = assemble_query(&weights, query)?;
        let mut model = ModelSession::new(&weights, id);
        model.adapt = config.mode == AdaptationMode::Tune;
        Ok(Self {
            id,
            query: assembled,
            config,
            raw: VecDeque::new(),
            projected: VecDeque::new(),
            next_index: 0,
            stats: CacheStats::default(),
            model,
            log: EmissionLog::new(),
            weights,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    pub fn mode(&self) -> AdaptationMode {
        self.config.mode
    }

    /// Fixes the adaptation mode; only allowed before the first snippet.
    pub fn set_adaptation_mode(&mut self, mode: AdaptationMode) -> Result<()> {
        if self.next_index != 0 {
            return Err(Error::Usage(format!(
                "adaptation mode can only change before the first snippet (stream {} is at {})",
                self.id, self.next_index
            )));
        }
        self.config.mode = mode;
        self.model.adapt = mode == AdaptationMode::Tune;
        Ok(())
    }

    pub fn model_session(&self) -> &ModelSession {
        &self.model
    }

    pub fn cache_len(&self) -> usize {
        self.projected.len()
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.stats
    }

    /// A clone that shares the log for concurrent reading.
    pub fn log(&self) -> EmissionLog {
        self.log.clone()
    }

    /// Stream time at the end of the last consumed snippet.
    pub fn time(&self) -> f64 {
        self.next_index as f64 * self.weights.config.snippet_seconds
    }

    /// Consumes the next snippet and returns the predictions emitted at this step.
    pub fn advance(&mut self, snippet: Snippet) -> Result<Vec<EmittedPrediction>> {
        if snippet.index != self.next_index {
            return Err(Error::Protocol(format!(
                "stream {} expected snippet {}, got {}",
                self.id, self.next_index, snippet.index
            )));
        }
        let config = &self.weights.config;
        if snippet.features.len() != config.video_dim {
            return Err(Error::Config(format!(
                "snippet {} has dimension {}, model expects {}",
                snippet.index,
                snippet.features.len(),
                config.video_dim
            )));
        }
        let k = config.window;
        self.raw.push_back(snippet.features);
        if self.raw.len() > k {
            self.raw.pop_front();
        }
        let (computed, reused) = if self.config.caching {
            let row = Matrix::row_vector(self.raw.back().expect("just pushed"));
            let projected = project_snippets(&self.weights, &row)?;
            self.projected.push_back(projected.row(0).to_vec());
            if self.projected.len() > k {
                self.projected.pop_front();
            }
            (1, self.projected.len() as u64 - 1)
        } else {
            self.projected.clear();
            for r in &self.raw {
                let projected = project_snippets(&self.weights, &Matrix::row_vector(r))?;
                self.projected.push_back(projected.row(0).to_vec());
            }
            (self.raw.len() as u64, 0)
        };
        self.stats.computed += computed;
        self.stats.reused += reused;
        self.stats.last_computed = computed;
        self.stats.last_reused = reused;

        let d = config.model_dim;
        let pad = k - self.projected.len();
        let mut window = Matrix::zeros(k, d);
        let mut mask = vec![false; k];
        for (i, row) in self.projected.iter().enumerate() {
            window.row_mut(pad + i).copy_from_slice(row);
            mask[pad + i] = true;
        }
        self.next_index += 1;
        let t = self.time();
        let features = WindowFeatures::from_projected(window, mask, t)?;
        let step = forward_step(
            &self.weights,
            &self.query,
            &features,
            StepMemory::Live(&mut self.model),
            false,
        )?;
        let selected = select_predictions(
            &step.refined,
            t,
            &config.anchors,
            config.snippet_seconds,
            self.config.theta,
        )?;
        let emitted: Vec<EmittedPrediction> = selected
            .into_iter()
            .map(|p| EmittedPrediction { s: p.s, e: p.e, score: p.score, emit_time: t })
            .collect();
        self.log.append(&emitted)?;
        Ok(emitted)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            id: self.id,
            config: self.config.clone(),
            raw: self.raw.iter().cloned().collect(),
            projected: self.projected.iter().cloned().collect(),
            next_index: self.next_index,
            stats: self.stats,
            model: self.model.clone(),
            log: self.log.entries(),
        }
    }

    /// Rebuilds a session from a snapshot taken with the same weights and query.
    pub fn resume(
        snapshot: SessionSnapshot,
        weights: Arc<ModelWeights>,
        query: &QueryBundle,
    ) -> Result<Self> {
        let mut session = Self::new(snapshot.id, weights, query, snapshot.config)?;
        if snapshot.model.stream_id() != snapshot.id {
            return Err(Error::Validation("snapshot memory belongs to another stream".into()));
        }
        session.raw = snapshot.raw.into();
        session.projected = snapshot.projected.into();
        session.next_index = snapshot.next_index;
        session.stats = snapshot.stats;
        session.model = snapshot.model;
        session.log.append(&snapshot.log)?;
        Ok(session)
    }
}

/// Feeds a whole snippet sequence into a fresh session and returns the final log.
pub fn run_stream(
    session: &mut StreamSession,
    snippets: impl IntoIterator<Item = Snippet>,
) -> Result<Vec<EmittedPrediction>> {
    for s in snippets {
        session.advance(s)?;
    }
    Ok(session.log.entries())
}

/// Snippets of a `T x D_v` feature matrix, in order.
pub fn snippets_of(features: &Matrix) -> impl Iterator<Item = Snippet> + '_ {
    (0..features.rows()).map(|i| Snippet { index: i, features: features.row(i).to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnchorConfig, Modality, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(theta: f64) -> (Arc<ModelWeights>, QueryBundle, Matrix) {
        let config = ModelConfig {
            video_dim: 4,
            query_dims: [4, 4, 4],
            model_dim: 6,
            ffn_dim: 6,
            window: 8,
            anchors: AnchorConfig { count: 3, longest: 4 },
            ..ModelConfig::default()
        };
        let weights = Arc::new(ModelWeights::init(&config, 11).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(theta.to_bits());
        let mut m = |r, c| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let q = QueryBundle::new(vec![(Modality::Text, m(1, 4))]).unwrap();
        let video = m(20, 4);
        (weights, q, video)
    }

    fn session(w: &Arc<ModelWeights>, q: &QueryBundle, config: StreamConfig) -> StreamSession {
        StreamSession::new(3, Arc::clone(w), q, config).unwrap()
    }

    #[test]
    fn first_step_with_full_threshold_emits_nothing() {
        let (w, q, v) = setup(1.0);
        let mut s = session(&w, &q, StreamConfig { theta: 1.0, ..StreamConfig::default() });
        let out = s.advance(snippets_of(&v).next().unwrap()).unwrap();
        assert!(out.is_empty());
        assert_eq!(s.cache_len(), 1);
    }

    #[test]
    fn cache_computes_one_feature_per_step() {
        let (w, q, v) = setup(0.5);
        let mut s = session(&w, &q, StreamConfig::default());
        for sn in snippets_of(&v).take(12) {
            s.advance(sn).unwrap();
        }
        let stats = s.cache_stats();
        assert_eq!((stats.last_computed, stats.last_reused), (1, 7));
        assert_eq!(stats.computed, 12);
    }

    #[test]
    fn out_of_order_snippet_is_protocol_error() {
        let (w, q, v) = setup(0.5);
        let mut s = session(&w, &q, StreamConfig::default());
        let mut it = snippets_of(&v);
        it.next();
        assert!(matches!(s.advance(it.next().unwrap()), Err(Error::Protocol(_))));
        let bad = Snippet { index: 0, features: vec![0.0; 3] };
        assert!(matches!(s.advance(bad), Err(Error::Config(_))));
    }

    #[test]
    fn replay_is_deterministic_and_times_non_decreasing() {
        let (w, q, v) = setup(0.0);
        let config = StreamConfig { theta: 0.0, ..StreamConfig::default() };
        let a = run_stream(&mut session(&w, &q, config.clone()), snippets_of(&v)).unwrap();
        let b = run_stream(&mut session(&w, &q, config), snippets_of(&v)).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(a.windows(2).all(|p| p[0].emit_time <= p[1].emit_time));
        let empty = run_stream(&mut session(&w, &q, StreamConfig::default()), std::iter::empty()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn mode_is_fixed_after_first_snippet() {
        let (w, q, v) = setup(0.5);
        let mut s = session(&w, &q, StreamConfig::default());
        s.set_adaptation_mode(AdaptationMode::Frozen).unwrap();
        s.advance(snippets_of(&v).next().unwrap()).unwrap();
        assert!(matches!(s.set_adaptation_mode(AdaptationMode::Tune), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_memory_never_changes_and_tune_memory_does() {
        let (w, q, v) = setup(0.5);
        let frozen_cfg = StreamConfig { mode: AdaptationMode::Frozen, ..StreamConfig::default() };
        let mut frozen = session(&w, &q, frozen_cfg);
        let mut tune = session(&w, &q, StreamConfig::default());
        let initial = frozen.model_session().memory_hash();
        assert_eq!(initial, tune.model_session().memory_hash());
        for sn in snippets_of(&v) {
            frozen.advance(sn.clone()).unwrap();
            tune.advance(sn).unwrap();
            assert_eq!(frozen.model_session().memory_hash(), initial);
        }
        assert_ne!(tune.model_session().memory_hash(), initial);
        assert!(Arc::ptr_eq(frozen.weights(), tune.weights()));
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let entries = vec![
            EmittedPrediction { s: 1.0, e: 3.25, score: 0.75, emit_time: 4.0 },
            EmittedPrediction { s: 0.5, e: 2.0, score: 0.625, emit_time: 4.0 },
        ];
        write_emission_log(&path, &entries).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"s":1.000000,"e":3.250000,"score":0.750000,"emit_time":4.000000}"#
        );
        assert_eq!(read_emission_log(&path).unwrap(), entries);
        fs::write(&path, format!("{}\n{{\"s\":1.0,", entries[0].to_json_line())).unwrap();
        match read_emission_log(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
