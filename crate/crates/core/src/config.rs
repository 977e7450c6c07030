//! One declarative run configuration covering every module, with dot-path overrides
//! and a resolved snapshot written next to each run's outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;
use crate::losses::LossConfig;
use crate::metrics::{DecayConfig, MetricGrid};
use crate::model::ModelConfig;
use crate::streaming::StreamConfig;
use crate::trainer::TrainConfig;

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    /// Expert training.
    pub train: TrainConfig,
    /// Student training.
    pub student: TrainConfig,
    pub loss: LossConfig,
    pub stream: StreamConfig,
    pub decay: DecayConfig,
    pub metrics: MetricGrid,
    /// Drift rate used by the drifting experiments.
    pub drift_rate: f64,
    /// Seeds of the multi-seed experiments.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            data: e.data,
            model: e.model,
            train: e.expert,
            student: e.student,
            loss: e.loss,
            stream: e.stream,
            decay: e.decay,
            metrics: MetricGrid::default(),
            drift_rate: e.drift_rate,
            seeds: e.seeds,
        }
    }
}

/// Rejects keys of `given` that do not exist in `reference`.
fn check_keys(given: &Value, reference: &Value, path: &str) -> Result<()> {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rv) => check_keys(v, rv, &here)?,
                None => return Err(Error::Config(format!("unknown configuration key '{here}'"))),
            }
        }
    }
    Ok(())
}

/// Sets `path` (dot-separated) in `root`. The value is parsed as JSON, or taken as a
/// string if it is not valid JSON.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                let slot = map
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown configuration key '{path}'")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("'{part}' in '{path}' is not an index")))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range in '{path}'")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("'{path}' does not name a nested key"))),
        };
    }
    Err(Error::Config("empty configuration path".into()))
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut value = defaults.clone();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let given: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.into(),
                line: e.line(),
                detail: e.to_string(),
            })?;
            check_keys(&given, &defaults, "")?;
            merge(&mut value, given);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut value, k.trim(), v.trim())?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        self.metrics.validate()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data.clone(),
            drift_rate: self.drift_rate,
            model: self.model.clone(),
            expert: self.train.clone(),
            student: self.student.clone(),
            loss: self.loss.clone(),
            stream: self.stream.clone(),
            decay: self.decay.clone(),
            seeds: self.seeds.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dot_paths() {
        let c = RunConfig::load(
            None,
            &["train.epochs=3".into(), "stream.mode=frozen".into(), "decay.thresholds.0=2".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.stream.mode, crate::streaming::AdaptationMode::Frozen);
        assert_eq!(c.decay.thresholds[0], 2.0);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::load(None, &["train.epoch=3".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["train.epochs=0".into()]), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"model": {"widht": 3}}"#).unwrap();
        match RunConfig::load(Some(&p), &[]) {
            Err(Error::Config(m)) => assert!(m.contains("model.widht")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn snapshot_reloads_to_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::load(None, &["seeds=[5]".into(), "loss.lambda=3".into()]).unwrap();
        c.write_snapshot(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join(SNAPSHOT_FILE)), &[]).unwrap();
        assert_eq!(back, c);
    }
}
