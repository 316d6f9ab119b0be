//! The single run configuration file shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refine::InferConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable overriding every seed in the config.
pub const SEED_ENV: &str = "ARMOR_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Concurrent training runs; 0 uses every available core.
    pub workers: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3],
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DatasetManifest,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub infer: InferConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub judge_command: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DatasetManifest::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            ablate: AblateConfig::default(),
            paths: Paths::default(),
            judge_command: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Sets the dataset, training and inference seeds at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.infer.seed = seed;
    }

    /// Applies `ARMOR_SEED` when set; returns the seed applied.
    pub fn apply_env(&mut self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
                self.set_seed(seed);
                Ok(Some(seed))
            }
            Err(std::env::VarError::NotPresent) => Ok(None),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Writes the resolved config as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
