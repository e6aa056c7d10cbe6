//! The flat run configuration accepted by `train`, `eval` and `search`.

use std::path::Path;

use gvt2rpm::training::{SplitMode, TrainConfig};
use gvt2rpm::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// How clips are split, by subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub split: SplitMode,
    pub split_seed: u64,
    /// Held-out fold under k-fold splitting.
    pub test_fold: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            split: SplitMode::IntraGuideline,
            split_seed: 0,
            test_fold: 0,
        }
    }
}

/// Limits for candidate evaluation in `search`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Candidates whose first stage has more tokens than this are recorded
    /// as failed instead of trained.
    pub search_max_tokens: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            search_max_tokens: 60 * 16 * 16,
        }
    }
}

/// Union of the model, training, split and search settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::general(true),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

fn as_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    }
}

/// Overlays `overrides` on `defaults`, naming the first key that fails.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(defaults: &T, overrides: &Map<String, Value>) -> Result<T> {
    let mut merged = as_object(defaults);
    for (k, v) in overrides {
        let mut single = as_object(defaults);
        single.insert(k.clone(), v.clone());
        serde_json::from_value::<T>(Value::Object(single))
            .map_err(|e| Error::Config(format!("config key `{k}`: {e}")))?;
        merged.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let d = RunConfig::default();
        let sections = [
            as_object(&d.model),
            as_object(&d.train),
            as_object(&d.split),
            as_object(&d.search),
        ];
        let mut parts: [Map<String, Value>; 4] = Default::default();
        for (k, v) in map {
            let Some(i) = sections.iter().position(|s| s.contains_key(&k)) else {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            };
            parts[i].insert(k, v);
        }
        let cfg = RunConfig {
            model: overlay(&d.model, &parts[0])?,
            train: overlay(&d.train, &parts[1])?,
            split: overlay(&d.split, &parts[2])?,
            search: overlay(&d.search, &parts[3])?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let SplitMode::KFold(k) = self.split.split {
            if self.split.test_fold >= k {
                return Err(Error::Config(format!("config key `test_fold`: {} is not below k = {k}", self.split.test_fold)));
            }
        }
        Ok(())
    }

    /// Every resolved key in one flat single-line object.
    pub fn to_json(&self) -> String {
        let mut all = as_object(&self.model);
        all.extend(as_object(&self.train));
        all.extend(as_object(&self.split));
        all.extend(as_object(&self.search));
        let mut s = serde_json::to_string(&Value::Object(all)).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_json(r#"{"base_width": 8, "epochs": 2, "split": {"KFold": 3}, "test_fold": 2}"#).unwrap();
        assert_eq!(cfg.model.base_width, 8);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.split.split, SplitMode::KFold(3));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(cfg.to_json().contains("\"scaling\":\"Scale-2\""));
    }

    #[test]
    fn bad_keys_are_named() {
        for (json, key) in [
            (r#"{"scaling": "Scale-9"}"#, "scaling"),
            (r#"{"batch_size": "four"}"#, "batch_size"),
            (r#"{"frobnicate": 1}"#, "frobnicate"),
            (r#"{"split": "Halves"}"#, "split"),
            (r#"{"split": {"KFold": 3}, "test_fold": 3}"#, "test_fold"),
        ] {
            let err = RunConfig::from_json(json).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
        assert!(RunConfig::from_json("[1]").is_err());
    }
}
