//! Experiment configuration: one JSON document plus dotted-path overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{AttackFamily, AttackSpec};
use crate::data::{BackgroundPlan, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::ArchitectureSpec;
use crate::training::TrainSpec;

/// Environment variable naming the MNIST directory.
pub const DATA_ENV: &str = "CLASSWISE_DATA";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundConfig {
    pub train: BackgroundPlan,
    /// Plan for the test split; the training plan when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<BackgroundPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// MNIST directory; `CLASSWISE_DATA` or `data/mnist` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<String>,
    /// Keep only the first `n` training examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint used by the attack and homing experiments; `<out>/model.ckpt`
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Defense label in reports; the training objective when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub attack: String,
    pub examples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackExperiment {
    #[serde(default)]
    pub attacks: Vec<String>,
    /// Inverse temperatures swept with `grid_base` as the template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpgd_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_base: Option<String>,
    /// Checkpoint of the substitute model for transfer attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitute: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomingExperiment {
    pub attack: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundExperiment {
    pub attack: String,
    /// Training recipe for the colourised model; the top-level one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceAdjustExperiment {
    pub attack: String,
    /// Defaults to the class with the lowest robust accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[f32; 3]>,
    /// Colourised model; `<out>/background_model.ckpt` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homing: Option<HomingExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_adjust: Option<InferenceAdjustExperiment>,
}

impl ExperimentsConfig {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Top-level seed; every other seed is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSpec,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attacks: BTreeMap<String, AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "ExperimentsConfig::is_empty")]
    pub experiments: ExperimentsConfig,
}

fn config_error(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Sets `value` at a dotted `path` inside `doc`, creating objects on the way.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(assignment, "override must look like key.path=value"))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(config_error(path, "empty key in override path"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*key).to_string(), value);
                    return Ok(());
                }
                map.entry((*key).to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| config_error(path, format!("`{key}` is not an array index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    config_error(path, format!("index {idx} out of range for {len} items"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(config_error(
                    keys[..depth].join("."),
                    "cannot descend into a scalar",
                ))
            }
        };
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a document, reporting the failing key path on error.
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            config_error(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| {
            config_error(
                ".",
                format!(
                    "invalid JSON at line {}, column {}: {e}",
                    e.line(),
                    e.column()
                ),
            )
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    fn attack(&self, path: &str, name: &str) -> Result<&AttackSpec> {
        self.attacks
            .get(name)
            .ok_or_else(|| config_error(path, format!("unknown attack `{name}`")))
    }

    /// Looks up a named attack that [`validate`](Self::validate) has resolved.
    pub fn named_attack(&self, name: &str) -> Result<&AttackSpec> {
        self.attack("attacks", name)
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.model.architecture.classes();
        self.model
            .architecture
            .validate()
            .map_err(|e| config_error("model.architecture", e.to_string()))?;
        self.train
            .validate(classes)
            .map_err(|e| config_error("train", e.to_string()))?;
        for (name, spec) in &self.attacks {
            spec.validate()
                .map_err(|e| config_error(format!("attacks.{name}"), e.to_string()))?;
        }
        match self.dataset.source {
            DataSource::Synthetic => {
                let s = self.dataset.synthetic.as_ref().ok_or_else(|| {
                    config_error(
                        "dataset.synthetic",
                        "synthetic source needs a `synthetic` section",
                    )
                })?;
                if s.classes != classes {
                    return Err(config_error(
                        "dataset.synthetic.classes",
                        format!("{} classes but the model has {classes}", s.classes),
                    ));
                }
            }
            DataSource::Mnist => {
                if classes != crate::data::idx::MNIST_CLASSES {
                    return Err(config_error(
                        "model.architecture.classes",
                        "MNIST has 10 classes",
                    ));
                }
            }
        }
        if let Some(bg) = &self.dataset.background {
            bg.train
                .validate(classes)
                .map_err(|e| config_error("dataset.background.train", e.to_string()))?;
            if let Some(t) = &bg.test {
                t.validate(classes)
                    .map_err(|e| config_error("dataset.background.test", e.to_string()))?;
            }
        }
        if let Some(p) = &self.probe {
            self.attack("probe.attack", &p.attack)?;
        }
        let ex = &self.experiments;
        if let Some(a) = &ex.attack {
            for (i, name) in a.attacks.iter().enumerate() {
                let spec = self.attack(&format!("experiments.attack.attacks[{i}]"), name)?;
                if spec.family == AttackFamily::Transfer && a.substitute.is_none() {
                    return Err(config_error(
                        "experiments.attack.substitute",
                        format!("transfer attack `{name}` needs a substitute checkpoint"),
                    ));
                }
            }
            if let Some(grid) = &a.tpgd_grid {
                let base = a.grid_base.as_deref().ok_or_else(|| {
                    config_error(
                        "experiments.attack.grid_base",
                        "a tpgd grid needs a base attack",
                    )
                })?;
                let spec = self.attack("experiments.attack.grid_base", base)?;
                if !matches!(spec.family, AttackFamily::Pgd | AttackFamily::Tpgd) {
                    return Err(config_error(
                        "experiments.attack.grid_base",
                        "grid base must be a pgd or tpgd attack",
                    ));
                }
                if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
                    return Err(config_error(
                        "experiments.attack.tpgd_grid",
                        "inverse temperatures must be positive",
                    ));
                }
            }
        }
        if let Some(h) = &ex.homing {
            self.attack("experiments.homing.attack", &h.attack)?;
        }
        if let Some(b) = &ex.background {
            self.attack("experiments.background.attack", &b.attack)?;
            if let Some(t) = &b.train {
                t.validate(classes)
                    .map_err(|e| config_error("experiments.background.train", e.to_string()))?;
            }
        }
        if let Some(i) = &ex.inference_adjust {
            self.attack("experiments.inference_adjust.attack", &i.attack)?;
            if i.target_class.is_some_and(|c| c >= classes) {
                return Err(config_error(
                    "experiments.inference_adjust.target_class",
                    "class out of range",
                ));
            }
        }
        Ok(())
    }

    /// MNIST directory: the config value, then `CLASSWISE_DATA`, then
    /// `data/mnist`.
    pub fn mnist_dir(&self) -> PathBuf {
        if let Some(d) = &self.dataset.mnist_dir {
            return PathBuf::from(d);
        }
        std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut doc = json!({"train": {"epochs": 3, "lr": {"milestones": [1, 2]}}});
        apply_override(&mut doc, "train.epochs=7").unwrap();
        apply_override(&mut doc, "train.lr.milestones.1=5").unwrap();
        apply_override(&mut doc, "model.defense=madry").unwrap();
        assert_eq!(doc["train"]["epochs"], json!(7));
        assert_eq!(doc["train"]["lr"]["milestones"], json!([1, 5]));
        assert_eq!(doc["model"]["defense"], json!("madry"));
        assert!(apply_override(&mut doc, "train.epochs.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "train.lr.milestones.9=1").is_err());
    }
}
