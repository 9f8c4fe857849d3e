use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, MtgFlow, TrainConfig};
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::flow::TargetBank;
use crate::gradengine::{ParamCheckpoint, ParamStore};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Everything needed to score new data: weights, frozen targets,
/// normalization statistics and the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: ParamCheckpoint,
    pub targets: TargetBank,
    pub norm: NormStats,
    pub entity_names: Vec<String>,
}

impl ModelCheckpoint {
    pub fn new(model: &MtgFlow, config: &TrainConfig, norm: NormStats, entity_names: Vec<String>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            config: config.clone(),
            model: model.config,
            params: model.params.to_checkpoint(),
            targets: model.targets.clone(),
            norm,
            entity_names,
        }
    }

    pub fn model(&self) -> Result<MtgFlow> {
        Ok(MtgFlow {
            config: self.model,
            params: ParamStore::from_checkpoint(&self.params)?,
            targets: self.targets.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::config(format!("{}: not a model checkpoint", path.display())))?;
        if version != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::CheckpointVersion(version as u32));
        }
        Ok(serde_json::from_value(value)?)
    }
}
