//! Reproducibility manifest written next to every CLI run.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{file_digest, write_atomic};
use crate::training::TrainConfig;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    /// Command-specific settings (method, runs, holdout, ...).
    pub settings: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Digest over the output digests, in order.
    pub output_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, config: &TrainConfig) -> Self {
        Self {
            command: command.to_string(),
            version: ARTIFACT_VERSION.to_string(),
            config: config.clone(),
            seeds: Vec::new(),
            settings: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            output_hash: String::new(),
            started_unix: now(),
            finished_unix: 0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("setting serializes");
        self.settings.insert(key.to_string(), v);
    }

    pub fn setting<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .settings
            .get(key)
            .ok_or_else(|| Error::Data(format!("manifest has no setting {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("manifest setting {key:?}: {e}")))
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Stamps the end time and the combined output hash.
    pub fn finish(&mut self) {
        let mut h = Sha256::new();
        for o in &self.outputs {
            h.update(o.sha256.as_bytes());
            h.update(b"\n");
        }
        self.output_hash = format!("{:x}", h.finalize());
        self.finished_unix = now();
    }

    /// Checks that every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for i in &self.inputs {
            let now = file_digest(Path::new(&i.path))?;
            if now != i.sha256 {
                return Err(Error::Data(format!("input {} changed since the run (digest {now})", i.path)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
