//! Checkpoint container.
//!
//! A checkpoint file has two parts separated by the first newline: a one-line JSON
//! header `{"format":"ovg-checkpoint","version":1,"sha256":"<hex>"}` and a JSON payload.
//! The hash covers the payload bytes exactly. Tensors are stored by name with their
//! shape and base64 of the little-endian 64-bit values, so round trips are bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::model::{ModelConfig, ModelWeights};
use crate::numerics::Matrix;
use crate::params;

pub const CHECKPOINT_FORMAT: &str = "ovg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Expert,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: Role,
    pub epochs: usize,
    pub seed: u64,
    /// Hash of the weights, see [`ModelWeights::content_hash`].
    pub weights_hash: String,
    /// Hash of the teacher a student was distilled from.
    pub teacher_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub meta: CheckpointMeta,
    /// Mean per-step loss of each epoch.
    pub history: Vec<LossBreakdown>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    meta: CheckpointMeta,
    history: Vec<LossBreakdown>,
    tensors: Vec<Tensor>,
}

fn encode(m: &Matrix) -> String {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(t: &Tensor) -> std::result::Result<Matrix, String> {
    let bytes = B64.decode(&t.data).map_err(|e| format!("tensor '{}': {e}", t.name))?;
    if bytes.len() != t.rows * t.cols * 8 {
        return Err(format!(
            "tensor '{}' holds {} bytes for shape {}x{}",
            t.name,
            bytes.len(),
            t.rows,
            t.cols
        ));
    }
    let data =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Matrix::from_vec(t.rows, t.cols, data).map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = Payload {
            model: self.weights.config.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            meta: self.meta.clone(),
            history: self.history.clone(),
            tensors: params::named_params(&self.weights)
                .into_iter()
                .map(|(name, m)| Tensor { name, rows: m.rows(), cols: m.cols(), data: encode(m) })
                .collect(),
        };
        let body = serde_json::to_string(&payload).expect("payload serializes");
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sha256: hex::encode(Sha256::digest(body.as_bytes())),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes").into_bytes();
        out.push(b'\n');
        out.extend_from_slice(body.as_bytes());
        out.push(b'\n');
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let broken = |detail: String| Error::Integrity { path: path.into(), detail };
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| broken("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| broken(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(broken(format!("not a checkpoint (format '{}')", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                header.version
            )));
        }
        let mut body = &bytes[split + 1..];
        if body.last() == Some(&b'\n') {
            body = &body[..body.len() - 1];
        }
        let actual = hex::encode(Sha256::digest(body));
        if actual != header.sha256 {
            return Err(broken(format!("hash mismatch: header {}, content {actual}", header.sha256)));
        }
        let payload: Payload =
            serde_json::from_slice(body).map_err(|e| broken(format!("unreadable payload: {e}")))?;
        let tensors = payload
            .tensors
            .iter()
            .map(|t| decode(t).map(|m| (t.name.as_str(), m)))
            .collect::<std::result::Result<Vec<_>, String>>()
            .map_err(broken)?;
        let mut weights = ModelWeights::zeros(&payload.model)?;
        weights.assign_from(tensors.iter().map(|(n, m)| (*n, m)))?;
        if weights.content_hash() != payload.meta.weights_hash {
            return Err(broken("weights do not match the recorded weights hash".into()));
        }
        Ok(Self {
            weights,
            loss: payload.loss,
            train: payload.train,
            meta: payload.meta,
            history: payload.history,
        })
    }

    /// Fails with a configuration error naming the first model field that differs from
    /// `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        config_difference(&self.weights.config, expected, "checkpoint")
    }
}

/// Configuration error naming the first field where `a` and `b` differ.
pub fn config_difference(a: &ModelConfig, b: &ModelConfig, what: &str) -> Result<()> {
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    let (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) = (&va, &vb) else {
        unreachable!("configs serialize to objects");
    };
    for (key, x) in ma {
        if mb.get(key) != Some(x) {
            return Err(Error::Config(format!(
                "{what} model.{key} = {x} does not match expected {}",
                mb.get(key).cloned().unwrap_or(serde_json::Value::Null)
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(path, &bytes)
}

/// Loads a checkpoint whose model must match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.ensure_compatible(expected)?;
    Ok(ckpt)
}
