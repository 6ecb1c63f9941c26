use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub sha256: String,
    /// Contains wall-clock measurements, so replays are not expected to
    /// reproduce the hash.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub volatile: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub params: serde_json::Value,
    pub inputs: BTreeMap<PathBuf, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: BTreeMap<PathBuf, OutputRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| signdelta::Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Collects what a command read and wrote, then writes the manifest next to
/// its first output.
pub struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, argv: &[String], params: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                params: serde_json::to_value(params).expect("params serialize"),
                inputs: BTreeMap::new(),
                seed,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                outputs: BTreeMap::new(),
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(path.to_path_buf(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path, volatile: bool) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.outputs.insert(path.to_path_buf(), OutputRecord { sha256, volatile });
        Ok(())
    }

    pub fn finish(self, primary: &Path) -> Result<PathBuf> {
        let path = manifest_path(primary);
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path).map_err(|e| signdelta::Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| signdelta::Error::Invalid(format!("{}: not a run manifest: {e}", path.display())).into())
}
