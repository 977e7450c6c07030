use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{DecoderLayer, FeedForward, Linear};
use super::mixer::{Mixer, MixerState};
use super::{Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::params::{self, ParamVisit};

/// Residual sequence-mixing sublayer followed by a residual feed-forward sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBlock {
    pub mixer: Mixer,
    pub ffn: FeedForward,
}

/// Every trainable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub video_proj: Linear,
    /// One projection per modality, indexed by `Modality::index`.
    pub query_proj: [Option<Linear>; 3],
    /// Learnable modality tokens, one row per modality.
    pub modality_tokens: Matrix,
    pub fusion: Vec<DecoderLayer>,
    pub memory: Vec<MemoryBlock>,
    /// Learnable anchor queries, `N x D`.
    pub anchor_embed: Matrix,
    /// Per decoder layer, an additive `N x K` logit prior from each anchor's span.
    pub anchor_bias: Vec<Matrix>,
    pub decoder: Vec<DecoderLayer>,
    pub cls_head: Linear,
    pub reg_head: Linear,
    /// Projects `[s_f, s_b, dl, do]` to the model dimension.
    pub prm_pred_proj: Linear,
    pub prm_anchor_proj: Matrix,
    pub prm_mixer: Mixer,
    pub prm_cls: Linear,
    pub prm_reg: Linear,
}

/// Logit prior of `-SPAN_PRIOR` outside the attended span at initialisation.
const SPAN_PRIOR: f64 = 3.0;

impl ModelWeights {
    /// Xavier-initialised weights from a seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let k = config.window;
        let n = config.anchors.count;
        let lengths = config.anchors.lengths();

        let video_proj = Linear::new(config.video_dim, d, &mut rng);
        let mut query_proj: [Option<Linear>; 3] = [None, None, None];
        for m in Modality::ALL {
            let layer = Linear::new(config.query_dims[m.index()], d, &mut rng);
            if config.modalities.contains(&m) {
                query_proj[m.index()] = Some(layer);
            }
        }
        let modality_tokens = gaussian(3, d, 0.5, &mut rng);
        let fusion = (0..config.fusion_layers)
            .map(|_| DecoderLayer::new(d, config.ffn_dim, &mut rng))
            .collect();
        let memory = (0..config.memory_blocks)
            .map(|_| MemoryBlock {
                mixer: Mixer::new(config.mixer, d, &mut rng),
                ffn: FeedForward::new(d, config.ffn_dim, &mut rng),
            })
            .collect();
        let anchor_embed = gaussian(n, d, 0.5, &mut rng);
        let anchor_bias = (0..config.decoder_layers)
            .map(|layer| {
                let mut b = Matrix::filled(n, k, -SPAN_PRIOR);
                for (a, &len) in lengths.iter().enumerate() {
                    // first layer looks at the anchor span, later layers at the span
                    // and the context just before it
                    let start = if layer == 0 { k - len } else { k.saturating_sub(2 * len) };
                    for j in start..k {
                        b.set(a, j, 0.0);
                    }
                }
                b
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer::new(d, config.ffn_dim, &mut rng))
            .collect();
        let cls_head = Linear::new(d, 2, &mut rng);
        let reg_head = Linear::new(d, 2, &mut rng);
        let prm_pred_proj = Linear::new(4, d, &mut rng);
        let prm_anchor_proj = Matrix::xavier(d, d, &mut rng);
        let prm_mixer = Mixer::new(config.mixer, d, &mut rng);
        let mut prm_cls = Linear::new(d, 2, &mut rng);
        let mut prm_reg = Linear::new(d, 2, &mut rng);
        prm_cls.w.scale(0.1);
        prm_reg.w.scale(0.1);

        Ok(Self {
            config: config.clone(),
            video_proj,
            query_proj,
            modality_tokens,
            fusion,
            memory,
            anchor_embed,
            anchor_bias,
            decoder,
            cls_head,
            reg_head,
            prm_pred_proj,
            prm_anchor_proj,
            prm_mixer,
            prm_cls,
            prm_reg,
        })
    }

    /// Zero tensors with the shapes of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        params::zero(&mut w);
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let mut w = self.clone();
        params::zero(&mut w);
        w
    }

    pub fn query_projection(&self, m: Modality) -> Result<&Linear> {
        self.query_proj[m.index()]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("modality {m} has no input projection")))
    }

    pub fn new_fusion_states(&self) -> Vec<MixerState> {
        self.memory.iter().map(|b| b.mixer.new_state()).collect()
    }

    pub fn new_prm_state(&self) -> MixerState {
        self.prm_mixer.new_state()
    }

    /// SHA-256 over every tensor name and value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in params::named_params(self) {
            h.update(name.as_bytes());
            m.feed_hash(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Copies tensors by name, failing on unknown, missing or mis-shaped entries.
    pub fn assign_from<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
    ) -> Result<()> {
        let mut incoming: std::collections::HashMap<&str, &Matrix> = tensors.into_iter().collect();
        for (name, dst) in params::named_params_mut(self) {
            let src = incoming
                .remove(name.as_str())
                .ok_or_else(|| Error::Config(format!("tensor '{name}' missing from source")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Config(format!(
                    "tensor '{name}' has shape {}x{}, model expects {}x{}",
                    src.rows(),
                    src.cols(),
                    dst.rows(),
                    dst.cols()
                )));
            }
            dst.as_mut_slice().copy_from_slice(src.as_slice());
        }
        if let Some(extra) = incoming.keys().next() {
            return Err(Error::Config(format!("unexpected tensor '{extra}'")));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut m = Matrix::zeros(rows, cols);
    for x in m.as_mut_slice() {
        *x = normal.sample(rng);
    }
    m
}

impl ParamVisit for ModelWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.video_proj.visit(&format!("{prefix}.video_proj"), f);
        for m in Modality::ALL {
            if let Some(l) = &self.query_proj[m.index()] {
                l.visit(&format!("{prefix}.query_proj.{m}"), f);
            }
        }
        f(format!("{prefix}.modality_tokens"), &self.modality_tokens);
        for (i, l) in self.fusion.iter().enumerate() {
            l.visit(&format!("{prefix}.fusion.{i}"), f);
        }
        for (i, b) in self.memory.iter().enumerate() {
            b.mixer.visit(&format!("{prefix}.memory.{i}.mixer"), f);
            b.ffn.visit(&format!("{prefix}.memory.{i}.ffn"), f);
        }
        f(format!("{prefix}.anchor_embed"), &self.anchor_embed);
        for (i, b) in self.anchor_bias.iter().enumerate() {
            f(format!("{prefix}.anchor_bias.{i}"), b);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("{prefix}.decoder.{i}"), f);
        }
        self.cls_head.visit(&format!("{prefix}.cls_head"), f);
        self.reg_head.visit(&format!("{prefix}.reg_head"), f);
        self.prm_pred_proj.visit(&format!("{prefix}.prm.pred_proj"), f);
        f(format!("{prefix}.prm.anchor_proj"), &self.prm_anchor_proj);
        self.prm_mixer.visit(&format!("{prefix}.prm.mixer"), f);
        self.prm_cls.visit(&format!("{prefix}.prm.cls"), f);
        self.prm_reg.visit(&format!("{prefix}.prm.reg"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        self.video_proj.visit_mut(&format!("{prefix}.video_proj"), f);
        for (m, slot) in Modality::ALL.iter().zip(self.query_proj.iter_mut()) {
            if let Some(l) = slot {
                l.visit_mut(&format!("{prefix}.query_proj.{m}"), f);
            }
        }
        f(format!("{prefix}.modality_tokens"), &mut self.modality_tokens);
        for (i, l) in self.fusion.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.fusion.{i}"), f);
        }
        for (i, b) in self.memory.iter_mut().enumerate() {
            b.mixer.visit_mut(&format!("{prefix}.memory.{i}.mixer"), f);
            b.ffn.visit_mut(&format!("{prefix}.memory.{i}.ffn"), f);
        }
        f(format!("{prefix}.anchor_embed"), &mut self.anchor_embed);
        for (i, b) in self.anchor_bias.iter_mut().enumerate() {
            f(format!("{prefix}.anchor_bias.{i}"), b);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.decoder.{i}"), f);
        }
        self.cls_head.visit_mut(&format!("{prefix}.cls_head"), f);
        self.reg_head.visit_mut(&format!("{prefix}.reg_head"), f);
        self.prm_pred_proj.visit_mut(&format!("{prefix}.prm.pred_proj"), f);
        f(format!("{prefix}.prm.anchor_proj"), &mut self.prm_anchor_proj);
        self.prm_mixer.visit_mut(&format!("{prefix}.prm.mixer"), f);
        self.prm_cls.visit_mut(&format!("{prefix}.prm.cls"), f);
        self.prm_reg.visit_mut(&format!("{prefix}.prm.reg"), f);
    }
}
