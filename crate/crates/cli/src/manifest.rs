//! Run manifests. A manifest is written with status `running` before any
//! result file and rewritten as `ok` (listing every result file) or `failed`
//! once the run ends.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dapfl::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub status: String,
    pub version: String,
    pub config: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub files: Vec<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// First 12 hex digits of the SHA-256 of the canonical config text.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(config.to_text().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn run_dir(out: &Path, config: &ExperimentConfig) -> PathBuf {
    out.join(format!("{}-s{}", config_hash(config), config.seed))
}

impl RunManifest {
    pub fn start(dir: &Path, config: &ExperimentConfig, seeds: Vec<u64>) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let m = RunManifest {
            status: "running".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.to_text(),
            config_hash: config_hash(config),
            seeds,
            output_dir: dir.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            files: Vec::new(),
            error: None,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        let path = self.output_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(mut self, files: Vec<String>) -> Result<()> {
        self.status = "ok".into();
        self.files = files;
        self.finished_unix = Some(now());
        self.write()
    }

    pub fn fail(mut self, error: &anyhow::Error) -> Result<()> {
        self.status = "failed".into();
        self.error = Some(format!("{error:#}"));
        self.finished_unix = Some(now());
        self.write()
    }
}
