//! Per-directory run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use trustlang::Error;

use crate::config::{sha256_hex, RunConfig};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    /// Full resolved configuration as TOML; `--config` with this file re-runs the command.
    pub config: String,
    pub features_hash: String,
    /// Command-specific details.
    pub details: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
    pub created_at_unix: u64,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, details: serde_json::Value) -> Result<Self, CliError> {
        Ok(Manifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            config: cfg.to_toml()?,
            features_hash: cfg.features_hash()?,
            details,
            outputs: Vec::new(),
            created_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// Hash `outputs` and write `<dir>/manifest.json`.
    pub fn write(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        for p in outputs {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(dir).unwrap_or(p);
            self.outputs.push(OutputEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
            });
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self).map_err(Error::from)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Read the manifest in `dir`, naming `producer` if it is absent.
    pub fn read(dir: &Path, producer: &str) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(missing(&path, producer));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: unreadable manifest: {e} (re-run `trustlang {producer}`)", path.display())).into())
    }
}

pub fn missing(path: &Path, producer: &str) -> CliError {
    Error::Data(format!(
        "missing artifact {} (produce it with `trustlang {producer}`)",
        path.display()
    ))
    .into()
}
