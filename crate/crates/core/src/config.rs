//! Run configuration file and per-run manifests.

use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::IngestSchema;
use crate::predictor::{DataConfig, ModelConfig, TrainConfig};
use crate::synth::SimConfig;
use crate::workload::LlmClientConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Raw request export (CSV).
    pub data: Option<PathBuf>,
    /// Region polygons (GeoJSON). Regions come from the district column when absent.
    pub regions: Option<PathBuf>,
    /// Feature property holding the region label in `regions`.
    pub region_property: String,
    /// Workload scores (`request_id,w,source`).
    pub workloads: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Run directory for every output.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            regions: None,
            region_property: "region".into(),
            workloads: None,
            checkpoint: None,
            output: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

/// Everything a CLI run reads. Unknown keys are rejected at every level.
///
/// `seed` replaces the seeds of the data and training sections; the
/// simulator keeps its own `simulate.seed` so a generated dataset does not
/// change when the training seed does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub schema: IngestSchema,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub llm: LlmClientConfig,
    pub simulate: SimConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 42,
            paths: Paths::default(),
            schema: IngestSchema::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            llm: LlmClientConfig::default(),
            simulate: SimConfig::default(),
            serve: ServeConfig::default(),
        };
        c.apply_seed();
        c
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.apply_seed();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn apply_seed(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.window != self.data.window {
            return Err(Error::Config(format!(
                "`model.window` ({}) must equal `data.window` ({})",
                self.model.window, self.data.window
            )));
        }
        self.train.validate()?;
        self.llm.validate()?;
        self.simulate.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_at: NaiveDateTime,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            args,
            config_hash: config.hash()?,
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: Utc::now().naive_utc(),
            config: config.clone(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.data.window, 14);
        assert_eq!(c.model.window, 14);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.model.hidden_width, 64);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        let err = RunConfig::from_toml("[model]\nwindow = 7\n").unwrap_err();
        assert!(err.to_string().contains("model.window"), "{err}");
        let c = RunConfig::from_toml("[model]\nwindow = 7\n[data]\nwindow = 7\n").unwrap();
        assert_eq!(c.model.window, 7);
    }

    #[test]
    fn top_level_seed_propagates_and_changes_hash() {
        let a = RunConfig::from_toml("seed = 7\n").unwrap();
        assert_eq!((a.train.seed, a.data.seed), (7, 7));
        assert_eq!(a.simulate.seed, SimConfig::default().seed);
        let b = RunConfig::from_toml("seed = 8\n").unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(
            a.hash().unwrap(),
            RunConfig::from_toml("seed = 7\n").unwrap().hash().unwrap()
        );
    }

    #[test]
    fn serialized_config_reloads() {
        let mut c = RunConfig::default();
        c.paths.data = Some("requests.csv".into());
        c.train.epochs = 3;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
