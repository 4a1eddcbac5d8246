//! Run configuration: one JSON file driving every command, with CLI
//! overrides applied on top. A run directory always receives the resolved
//! config that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fingat_core::data::DataOptions;
use fingat_core::model::ModelConfig;
use fingat_core::train::TrainConfig;
use fingat_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub prices_csv: PathBuf,
    pub sectors_csv: PathBuf,
    pub cache_path: PathBuf,
    pub run_dir: PathBuf,
    pub split_ratios: (f64, f64, f64),
    pub data: DataOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// K values for evaluation reports.
    pub k_list: Vec<usize>,
    /// Seeds for multi-seed training; each runs in its own subdirectory.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prices_csv: PathBuf::from("prices.csv"),
            sectors_csv: PathBuf::from("sectors.csv"),
            cache_path: PathBuf::from("instances.cache.jsonl"),
            run_dir: PathBuf::from("runs/default"),
            split_ratios: (0.6, 0.2, 0.2),
            data: DataOptions::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            k_list: vec![5, 10],
            seeds: vec![7],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        // Relative paths resolve against the config file's directory.
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.prices_csv,
                &mut cfg.sectors_csv,
                &mut cfg.cache_path,
                &mut cfg.run_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&p);
                }
            }
        }
        Ok(cfg)
    }

    /// Keep the per-epoch validation metrics on the same K grid as the
    /// final evaluation.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig { k_list: self.k_list.clone(), ..self.train.clone() }
    }

    pub fn write_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
