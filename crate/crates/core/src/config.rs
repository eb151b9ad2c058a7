//! Run configuration: the checked-in defaults merged with an optional user
//! file, both in `section.key = value` form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branches, ModelConfig};
use crate::postprocess::DetectParams;
use crate::sampling::{synthetic_backbone, SamplingConfig, SyntheticBackbone};
use crate::train::TrainConfig;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.conf");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub seed: u64,
    pub frame_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub branch_filters: usize,
    pub head_kernel: usize,
    pub branches: Branches,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sampling: SamplingConfig,
    pub backbone: BackboneSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub detect: DetectParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_overrides("").expect("built-in default config is valid")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults with `text` layered on top.
    pub fn from_overrides(text: &str) -> Result<Self> {
        let mut base: toml::Table = DEFAULT_CONFIG
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("default config: {e}")))?;
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::from_overrides(""),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_overrides(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.backbone.frame_dim == 0 {
            return Err(Error::Config("backbone.frame_dim must be ≥ 1".into()));
        }
        self.model_config(1)?;
        self.train.validate()?;
        self.detect.validate()
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            scales: self.sampling.scales,
            base_segments: self.sampling.base_segments,
            feature_dim: self.model.feature_dim,
            branch_filters: self.model.branch_filters,
            head_kernel: self.model.head_kernel,
            num_classes,
            branches: self.model.branches,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone(&self) -> SyntheticBackbone {
        synthetic_backbone(self.backbone.seed, self.backbone.frame_dim, self.model.feature_dim)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}
