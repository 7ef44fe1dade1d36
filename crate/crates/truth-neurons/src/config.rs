//! Run configuration shared by the pipeline subcommands: one JSON file,
//! flag-overridable, hashed into every artifact so outputs are traceable
//! to the exact settings that produced them.

use crate::selection::SelectionConfig;
use crate::tasks::DatasetFormat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub dataset_format: DatasetFormat,
    pub selection: SelectionConfig,
    pub repetitions: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            checkpoint: PathBuf::from("out/model.ckpt"),
            dataset: PathBuf::from("out/dataset.jsonl"),
            dataset_format: DatasetFormat::TruthfulqaJsonl,
            selection: SelectionConfig::default(),
            repetitions: 10,
            out_dir: PathBuf::from("out"),
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&canon);
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Wrapper written around every JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_hash: String,
    pub seed: u64,
    pub payload: T,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_config_files_fill_defaults() {
        let parsed: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.repetitions, 10);
        assert!((parsed.selection.p_percent - 40.0).abs() < 1e-12);
        assert_eq!(parsed.selection.m, 20);
    }
}
