//! Experiment configuration (TOML).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{FitConfig, Preset};
use crate::synthgen::{GenConfig, CATEGORIES};

/// Everything needed to reproduce a generate/fit/evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub categories: Vec<String>,
    pub instances_per_category: usize,
    pub seed: u64,
    pub presets: Vec<Preset>,
    pub gen: GenConfig,
    pub fit: FitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            categories: CATEGORIES.iter().map(|c| c.to_string()).collect(),
            instances_per_category: 8,
            seed: 0,
            presets: Preset::ALL.to_vec(),
            gen: GenConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::InvalidConfig("no categories selected".into()));
        }
        if self.instances_per_category == 0 {
            return Err(Error::InvalidConfig(
                "instances_per_category must be positive".into(),
            ));
        }
        if self.presets.is_empty() {
            return Err(Error::InvalidConfig("no presets selected".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(path, text)?;
    Ok(())
}
