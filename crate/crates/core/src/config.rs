//! Run configuration: one JSON document with `model`, `train`, `recon` and
//! `data` namespaces, overridable with `ns.key=value` assignments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::energy::ReconConfig;
use crate::error::{DcerError, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub recon: ReconConfig,
    pub data: SyntheticSpec,
}

impl RunConfig {
    /// Reads a config document, or the `config` member of an
    /// effective-config echo so a run can be repeated from its echo.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DcerError::io(path, e))?;
        let bad = |e: serde_json::Error| DcerError::Config(format!("{}: {e}", path.display()));
        let mut doc: Value = serde_json::from_str(&text).map_err(bad)?;
        if let Some(obj) = doc.as_object_mut() {
            if obj.contains_key("argv") {
                if let Some(inner) = obj.remove("config") {
                    doc = inner;
                }
            }
        }
        serde_json::from_value(doc).map_err(bad)
    }

    /// Loads `path` if given, otherwise defaults, then applies overrides
    /// and validates every namespace.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `ns.key=value` assignments. Values parse as JSON when they
    /// can and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| DcerError::Config(format!("override {o:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|obj| obj.get_mut(part))
                    .ok_or_else(|| DcerError::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| DcerError::Config(format!("invalid override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.recon.validate()?;
        self.data.validate()?;
        let (m, d) = (&self.model, &self.data);
        if (m.audio_len, m.audio_dim, m.video_len, m.video_dim, m.text_len, m.vocab)
            != (d.audio_len, d.audio_dim, d.video_len, d.video_dim, d.text_len, d.vocab)
        {
            return Err(DcerError::Config("model input dimensions disagree with data".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| DcerError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let cfg = RunConfig::default()
            .with_overrides(&["train.lr=0.5".into(), "recon.steps=7".into()])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.recon.steps, 7);
        assert!(RunConfig::default().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.lr=\"x\"".into()]).is_err());
    }

    #[test]
    fn echo_documents_load_as_their_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_overrides(&["train.epochs=3".into()]).unwrap();
        let path = dir.path().join("echo.json");
        let echo = serde_json::json!({"argv": ["dcer", "train"], "command": {}, "config": cfg});
        fs::write(&path, echo.to_string()).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap(), cfg);
        let plain = dir.path().join("plain.json");
        cfg.write(&plain).unwrap();
        assert_eq!(RunConfig::from_file(&plain).unwrap(), cfg);
    }

    #[test]
    fn default_is_consistent() {
        RunConfig::default().validate().unwrap();
    }
}
