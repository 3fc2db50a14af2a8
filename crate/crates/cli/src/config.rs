//! Run configuration as flat `section.key = value` text.
//!
//! Values are JSON literals (`0.2`, `[1, 2, 4, 8]`, `"literal"`); a bare
//! word that is not valid JSON is read as a string.

use std::path::{Path, PathBuf};

use mfds_core::loss::SupervisionConfig;
use mfds_core::model::ModelConfig;
use mfds_data::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: SupervisionConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out
    }

    pub fn dump(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` assignments in order.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), ConfigError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (key, raw) in assignments {
            let (key, raw) = (key.trim(), raw.trim());
            let unknown = || ConfigError(format!("unknown key `{key}`"));
            let (parent, leaf) = key.rsplit_once('.').unwrap_or(("", key));
            let pointer = if parent.is_empty() { String::new() } else { format!("/{}", parent.replace('.', "/")) };
            let obj = tree.pointer_mut(&pointer).and_then(Value::as_object_mut).ok_or_else(unknown)?;
            if !obj.contains_key(leaf) {
                return Err(unknown());
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert(leaf.to_string(), value);
        }
        *self = serde_json::from_value(tree).map_err(|e| ConfigError(format!("invalid value: {e}")))?;
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k, v));
        }
        self.apply(pairs)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.parse_text(&text)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.train.theta = 0.3;
        cfg.model.ks = vec![1, 2];
        cfg.paths.data = Some("/tmp/x".into());
        let mut back = RunConfig::default();
        back.parse_text(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn assignments_and_errors() {
        let mut cfg = RunConfig::default();
        cfg.parse_text("# comment\ntrain.epochs = 7\nmodel.add_mode = literal\npaths.split = val\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.paths.split, "val");
        assert_eq!(cfg.model.add_mode, mfds_core::model::AddModeConfig::Literal);
        assert!(cfg.parse_text("train.nope = 1").is_err());
        assert!(cfg.parse_text("train.epochs = many").is_err());
        assert!(cfg.parse_text("no equals sign").is_err());
    }

    #[test]
    fn defaults_carry_the_reference_settings() {
        let e: std::collections::HashMap<_, _> = RunConfig::default().entries().into_iter().collect();
        assert_eq!(e["train.theta"], "0.2");
        assert_eq!(e["train.phi"], "0.5");
        assert_eq!(e["train.learning_rate"], "0.001");
        assert_eq!(e["train.epochs"], "200");
    }
}
