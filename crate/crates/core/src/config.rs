//! Run configuration: one JSON document with `model`, `data`, `train` and
//! `v2x` sections. Every field has a default and unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fleet::{ModelConfig, V2XConfig};
use crate::scenario::ScenarioFamily;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    /// Scenario `i` is drawn from `families[i % families.len()]`.
    pub families: Vec<ScenarioFamily>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 2000,
            seed: 0,
            families: vec![ScenarioFamily::default()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub v2x: V2XConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        RunConfig::load(Some(text), &[])
    }

    /// Parse `text` (`None` means all defaults) and apply `key=value`
    /// overrides such as `train.epochs=0`.
    pub fn load(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value = match text {
            Some(t) => serde_json::from_str(t)?,
            None => serde_json::to_value(RunConfig::default())?,
        };
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolved(mut self) -> Self {
        self.train.v2x = self.v2x.clone();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.families.is_empty() {
            return Err(Error::Config("data.families must not be empty".into()));
        }
        for f in &self.data.families {
            f.validate()?;
            if f.feature_dim != self.model.feature_dim {
                return Err(Error::Config(format!(
                    "data feature_dim {} differs from model.feature_dim {}",
                    f.feature_dim, self.model.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Fully resolved configuration as pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override key `{key}`")))
}
