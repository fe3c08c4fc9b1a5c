//! Run configuration file. Every section is optional; command-line flags
//! take precedence over the file, which takes precedence over defaults.

use std::path::Path;

use dismesh_core::eval::EvalOptions;
use dismesh_core::model::ModelConfig;
use dismesh_core::trainer::TrainConfig;
use dismesh_serve::ServeConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub subjects: usize,
    pub poses: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { subjects: 20, poses: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            ));
        }
        Ok(cfg)
    }
}
