//! The grounding network: query assembly, cross-modal fusion with memory blocks,
//! anchor decoding, prediction refinement and emission selection.

mod forward;
mod layers;
mod mixer;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use forward::{
    anchor_to_interval, assemble_query, decode_anchors, forward_step, fuse, interval_to_offsets,
    model_backward, project_snippets, refine, select_predictions, AnchorPrediction,
    AssembledQuery, ModelSession, OutputGrads, Prediction, RawPrediction, RefinedPrediction,
    StepForward, StepMemory, StepSnapshots, WindowFeatures,
};
pub use layers::{CrossAttention, DecoderLayer, FeedForward, Linear};
pub use mixer::{
    MemoryAccess, MemorySnapshot, Mixer, MixerCache, MixerKind, MixerState, RecurrentCell,
    WindowAttention, WritePlan,
};
pub use weights::{MemoryBlock, ModelWeights};

/// Query modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Segment,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Segment];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Segment => "segment",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "segment" => Ok(Modality::Segment),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// A set of modalities used together as one query, e.g. `text+segment`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QueryKind(Vec<Modality>);

impl QueryKind {
    pub fn new(mut mods: Vec<Modality>) -> Result<Self> {
        mods.sort();
        mods.dedup();
        if mods.is_empty() {
            return Err(Error::Config("a query needs at least one modality".into()));
        }
        Ok(Self(mods))
    }

    pub fn single(m: Modality) -> Self {
        Self(vec![m])
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.0
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|m| m.label()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for QueryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mods = s.split('+').map(|p| p.trim().parse()).collect::<Result<Vec<_>>>()?;
        QueryKind::new(mods)
    }
}

impl TryFrom<String> for QueryKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QueryKind> for String {
    fn from(q: QueryKind) -> String {
        q.to_string()
    }
}

/// Hybrid-modal query: feature sequences per modality, kept in canonical order
/// (text, image, segment) regardless of construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBundle {
    parts: Vec<(Modality, Matrix)>,
}

impl QueryBundle {
    pub fn new(mut parts: Vec<(Modality, Matrix)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Config("query bundle needs at least one part".into()));
        }
        parts.sort_by_key(|(m, _)| *m);
        for w in parts.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Config(format!("modality {} given twice", w[0].0)));
            }
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[(Modality, Matrix)] {
        &self.parts
    }

    pub fn kind(&self) -> QueryKind {
        QueryKind(self.parts.iter().map(|(m, _)| *m).collect())
    }
}

/// Anchor geometry: `count` anchors ending at the current time, with lengths
/// `longest / 2^(n-1)` snippets for `n = 1..=count` (longest first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub count: usize,
    pub longest: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { count: 4, longest: 8 }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("anchors.count must be at least 1".into()));
        }
        let div = 1usize
            .checked_shl(self.count as u32 - 1)
            .ok_or_else(|| Error::Config("anchors.count too large".into()))?;
        if self.longest < div || self.longest % div != 0 {
            return Err(Error::Config(format!(
                "anchors.longest {} must be a positive multiple of 2^(count-1) = {div}",
                self.longest
            )));
        }
        Ok(())
    }

    /// Anchor lengths in snippets, longest first.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.count).map(|n| self.longest >> n).collect()
    }

    /// Anchor lengths in seconds.
    pub fn lengths_seconds(&self, snippet_seconds: f64) -> Vec<f64> {
        self.lengths().into_iter().map(|l| l as f64 * snippet_seconds).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Snippet feature dimension.
    pub video_dim: usize,
    /// Feature dimension of each query modality, in canonical order.
    pub query_dims: [usize; 3],
    /// Modalities that get an input projection.
    pub modalities: Vec<Modality>,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Snippets per window.
    pub window: usize,
    pub snippet_seconds: f64,
    pub anchors: AnchorConfig,
    pub fusion_layers: usize,
    pub memory_blocks: usize,
    pub decoder_layers: usize,
    pub mixer: MixerKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_dim: 16,
            query_dims: [16, 16, 16],
            modalities: Modality::ALL.to_vec(),
            model_dim: 16,
            ffn_dim: 16,
            window: 16,
            snippet_seconds: 2.0,
            anchors: AnchorConfig::default(),
            fusion_layers: 2,
            memory_blocks: 2,
            decoder_layers: 2,
            mixer: MixerKind::Pml,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let positive = [
            ("video_dim", self.video_dim),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("window", self.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.query_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model.query_dims must be positive".into()));
        }
        if self.anchors.longest > self.window {
            return Err(Error::Config(format!(
                "longest anchor ({} snippets) exceeds the window ({} snippets)",
                self.anchors.longest, self.window
            )));
        }
        if !(self.snippet_seconds > 0.0) {
            return Err(Error::Config("model.snippet_seconds must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("model.modalities must not be empty".into()));
        }
        Ok(())
    }

    pub fn anchor_seconds(&self) -> Vec<f64> {
        self.anchors.lengths_seconds(self.snippet_seconds)
    }
}
