//! The JSON document driving `train`: model, training recipe, data location
//! and output directory. Unknown keys are rejected; every field has a default.

use std::fs;
use std::path::{Path, PathBuf};

use protograph_core::config::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::manifest::Split;

/// Environment variable overriding the configured seed. A `--seed` flag wins
/// over it.
pub const SEED_ENV: &str = "PROTOGRAPH_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `manifest.json`.
    pub dir: Option<PathBuf>,
    pub train_split: Split,
    /// Split evaluated after every epoch, when present in the manifest.
    pub val_split: Option<Split>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: None, train_split: Split::Train, val_split: Some(Split::Val) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> AppResult<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| AppError::Usage(format!("invalid run config: {e}")))?;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Parses `path`, returning the config and the raw text for echoing.
    pub fn load(path: &Path) -> AppResult<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let config = Self::from_json(&text).map_err(|e| match e {
            AppError::Usage(msg) => AppError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok((config, text))
    }
}

/// Seed precedence: flag, then `PROTOGRAPH_SEED`, then the config value.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> AppResult<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match env {
        Some(text) => text
            .trim()
            .parse()
            .map_err(|_| AppError::Usage(format!("{SEED_ENV}={text:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}

pub fn seed_from_env() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}
