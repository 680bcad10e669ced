//! Experiment configuration files.

use std::path::{Path, PathBuf};

use amean::data::{generate_blended, BlendedDataset, DataSpec};
use amean::trainer::TrainConfig;
use amean::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the data comes from: generated per seed from a spec, or one CSV
/// shared by every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Spec(DataSpec),
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Spec(DataSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSource,
    /// Training settings, including the meta-learner under `train.dec`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { data: DataSource::default(), train: TrainConfig::default(), seeds: default_seeds(), out_dir: default_out_dir() }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config. Relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = parse_json(path, &text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Path(p) = &mut cfg.data {
            *p = base.join(&*p);
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if let DataSource::Spec(spec) = &self.data {
            spec.validate()?;
        }
        self.train.validate()
    }

    /// The dataset used by `seed`.
    pub fn dataset(&self, seed: u64) -> Result<BlendedDataset> {
        match &self.data {
            DataSource::Spec(spec) => generate_blended(spec, seed),
            DataSource::Path(p) => BlendedDataset::load(p),
        }
    }
}

/// Parses JSON, prefixing errors with the file so the position is readable.
pub fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Side file recording how a dataset was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub spec_sha256: String,
    pub seed: u64,
    pub rows: usize,
    pub dim: usize,
    pub classes: usize,
    pub subtargets: usize,
}

impl DataManifest {
    pub fn new(spec_bytes: &[u8], seed: u64, ds: &BlendedDataset) -> Self {
        Self {
            spec_sha256: sha256_hex(spec_bytes),
            seed,
            rows: ds.n_source() + ds.n_target(),
            dim: ds.dim(),
            classes: ds.classes(),
            subtargets: ds.k(),
        }
    }

    pub fn path_for(data_path: &Path) -> PathBuf {
        data_path.with_extension("manifest.json")
    }
}
