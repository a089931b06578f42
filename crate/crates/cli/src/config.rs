use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use kuda_core::data::GeneratorConfig;
use kuda_core::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

/// Everything a command needs. The resolved copy written next to the outputs
/// reproduces the run on its own.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset to read; `<out>/dataset.jsonl` when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        let train = match p {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        Self {
            dataset: None,
            generator: GeneratorConfig {
                label_range: train.model.label_range,
                ..GeneratorConfig::default()
            },
            train,
        }
    }

    /// Profile defaults, overlaid with the JSON file at `path`, then `seed`.
    pub fn resolve(
        profile: Profile,
        path: Option<&Path>,
        seed: Option<u64>,
    ) -> Result<Self, Failure> {
        let mut value = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            let overlay: Value = serde_json::from_str(&text).map_err(|e| {
                Failure::Usage(format!("config {} is not valid JSON: {e}", path.display()))
            })?;
            merge(&mut value, overlay);
        }
        let mut cfg: Self = serde_json::from_value(value)
            .map_err(|e| Failure::Usage(format!("invalid config: {e}")))?;
        if let Some(seed) = seed {
            cfg.train.seed = seed;
        }
        cfg.train
            .validate()
            .map_err(|e| Failure::Usage(e.to_string()))?;
        if cfg.generator.label_range != cfg.train.model.label_range {
            return Err(Failure::Usage(
                "generator.label_range and train.model.label_range differ".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn dataset_path(&self, out: &Path) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| out.join("dataset.jsonl"))
    }
}

/// Object fields merge recursively; any other overlay value replaces the base.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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
