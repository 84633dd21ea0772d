//! Run configuration: a JSON document with `arch`, `data`, `train`, `seed`,
//! and `out_dir` sections. Unknown keys are rejected before any computation.

use serde::{Deserialize, Serialize};

use crate::arch::{preset, NetworkSpec};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Architecture selection: a preset name (optionally with a class-count
/// override) or a full network spec.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub preset: Option<String>,
    pub classes: Option<usize>,
    pub spec: Option<NetworkSpec>,
}

impl ArchConfig {
    /// Resolves to a concrete spec; `default_classes` fills in the class
    /// count when neither an override nor a full spec pins it.
    pub fn resolve(&self, default_classes: usize) -> Result<NetworkSpec> {
        match (&self.spec, &self.preset) {
            (Some(spec), None) => {
                spec.validate()?;
                Ok(spec.clone())
            }
            (None, Some(name)) => preset(name, self.classes.unwrap_or(default_classes)),
            (None, None) => preset("twistnet-micro", self.classes.unwrap_or(default_classes)),
            (Some(_), Some(_)) => Err(Error::Config(
                "arch: give either a preset or a full spec, not both".into(),
            )),
        }
    }
}

/// Data source: an in-memory synthetic dataset or an image folder.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: Option<DatasetSpec>,
    pub image_folder: Option<String>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.synthetic.is_some() && self.image_folder.is_some() {
            return Err(Error::Config(
                "data: give either a synthetic spec or an image folder, not both".into(),
            ));
        }
        Ok(())
    }

    /// The synthetic spec in effect (defaults apply when nothing is given
    /// and no folder is configured).
    pub fn synthetic_spec(&self) -> Option<DatasetSpec> {
        if self.image_folder.is_some() {
            self.synthetic.clone()
        } else {
            Some(self.synthetic.clone().unwrap_or_default())
        }
    }
}

/// Top-level run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub out_dir: String,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            out_dir: "runs/out".into(),
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    /// Parses a JSON document, rejecting unknown keys anywhere in it.
    pub fn from_json(json: &str) -> Result<Config> {
        let cfg: Config =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
