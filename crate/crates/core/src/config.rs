//! Run configuration: one TOML table per stage. Missing keys take their
//! defaults; unknown top-level tables are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MatchConfig, SynthConfig};
use crate::downstream::{FinetuneConfig, SimBenchConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cell side in metres.
    pub cell_size: f64,
    /// Offset from UTC in seconds used for minute-of-day and weekday.
    pub utc_offset: i64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cell_size: 100.0, utc_offset: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub matching: MatchConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub benchmark: SimBenchConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        if !(self.grid.cell_size > 0.0) {
            return Err(Error::Config(format!("grid cell size {}", self.grid.cell_size)));
        }
        Ok(())
    }
}
