//! Run configuration: one JSON document with `data`, `model`, `losses`,
//! `optim` and `output` sections, plus dotted command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::training::optim::OptimConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory. When unset, `train` generates `synthetic` in memory.
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// JSON-lines metrics stream; `{out}/metrics.jsonl` when unset.
    pub log: Option<PathBuf>,
    /// Per-epoch checkpoint directory; `{out}/checkpoints` when unset.
    pub ckpt_dir: Option<PathBuf>,
    pub epoch_checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            log: None,
            ckpt_dir: None,
            epoch_checkpoints: true,
        }
    }
}

impl OutputConfig {
    pub fn log_path(&self, out: &Path) -> PathBuf {
        self.log.clone().unwrap_or_else(|| out.join("metrics.jsonl"))
    }

    pub fn ckpt_path(&self, out: &Path) -> PathBuf {
        self.ckpt_dir.clone().unwrap_or_else(|| out.join("checkpoints"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub optim: OptimConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        self.optim.validate()
    }

    /// Reads `path` (or starts from defaults) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
                // Parse once as-is so unknown keys in the file are reported before merging.
                serde_json::from_value::<RunConfig>(v.clone())
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                v
            }
            None => Value::Object(Default::default()),
        };
        let defaults = serde_json::to_value(RunConfig::default())?;
        merge_defaults(&mut value, &defaults);
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn merge_defaults(value: &mut Value, defaults: &Value) {
    if let (Value::Object(v), Value::Object(d)) = (value, defaults) {
        for (k, dv) in d {
            match v.get_mut(k) {
                Some(existing) => merge_defaults(existing, dv),
                None => {
                    v.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

/// Sets `key` (dotted path, e.g. `losses.consistency`) to `raw`. The value is
/// parsed as JSON when possible; a comma list becomes an array when the
/// current value is one; anything else is taken as a string. `modalities`
/// is shorthand for `model.modalities`.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let key = if key == "modalities" { "model.modalities" } else { key };
    let mut node = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let known = node.as_object().is_some_and(|o| o.contains_key(*part));
        if !known {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        node = node.get_mut(*part).expect("key checked above");
        if i + 1 == parts.len() {
            *node = parse_value(node, raw);
        }
    }
    Ok(())
}

fn parse_value(current: &Value, raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if !(current.is_array() && !v.is_array()) {
            return v;
        }
    }
    if current.is_array() {
        return Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
                .collect(),
        );
    }
    Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;
    use crate::model::FusionStrategy;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::load(
            None,
            &ov(&[
                ("losses.consistency", "false"),
                ("model.fusion", "summation"),
                ("modalities", "rgb,flow"),
                ("optim.lr", "0.001"),
                ("losses.lambda_rank.audio", "2"),
                ("losses.margin", "1.5"),
            ]),
        )
        .unwrap();
        assert!(!c.losses.consistency);
        assert_eq!(c.model.fusion, FusionStrategy::Summation);
        assert_eq!(c.model.modalities, vec![Modality::Rgb, Modality::Flow]);
        assert_eq!(c.optim.lr, 0.001);
        assert_eq!(c.losses.lambda_rank.audio, 2.0);
        assert_eq!(c.losses.margin, Some(1.5));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::load(None, &ov(&[("losses.consistancy", "false")])).unwrap_err();
        assert!(err.to_string().contains("losses.consistancy"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"model": {"layerz": 3}}"#).unwrap();
        let err = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("layerz"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::load(None, &ov(&[("model.dropout", "1.5")])).is_err());
        assert!(RunConfig::load(None, &ov(&[("modalities", "rgb,video")])).is_err());
    }

    #[test]
    fn partial_file_and_resolved_echo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"optim": {"epochs": 3}, "data": {"synthetic": {"n_samples": 20, "n_test": 5}}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.optim.epochs, 3);
        assert_eq!(c.optim.batch_size, OptimConfig::default().batch_size);
        let resolved = c.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&resolved), &[]).unwrap(), c);
    }
}
