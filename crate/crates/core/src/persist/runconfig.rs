use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, PersistError, Result};
use crate::model::ModelConfig;
use crate::raster::RenderSettings;
use crate::synthdata::DataConfig;
use crate::trainer::TrainConfig;

/// Everything a CLI run needs. Missing sections fall back to the desk preset;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub raster: RenderSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            raster: RenderSettings::default(),
        }
    }

    /// Full-size architecture; data is rendered to match its input size.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        let data = DataConfig { image_size: model.image_size, expr_dim: model.expr_dim, ..DataConfig::default() };
        Self { model, data, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk-scale" => Some(Self::desk()),
            "paper-scale" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| PersistError::Config(m);
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.data.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.raster.validate().map_err(|e| cfg(e.to_string()))?;
        if self.model.image_size != self.data.image_size {
            return Err(cfg(format!(
                "model input is {} px but data is rendered at {} px",
                self.model.image_size, self.data.image_size
            )));
        }
        if self.model.expr_dim != self.data.expr_dim {
            return Err(cfg(format!(
                "model expects {} expression values, data has {}",
                self.model.expr_dim, self.data.expr_dim
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| PersistError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a JSON file, or a preset when `arg` names one.
    pub fn load(arg: &str) -> Result<Self> {
        if let Some(p) = Self::preset(arg) {
            return Ok(p);
        }
        let path = Path::new(arg);
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
