//! Run manifests: the resolved configuration plus input and artifact
//! hashes, enough to re-execute a run and compare its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::InputError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "iae-run";
pub const MANIFEST_VERSION: u32 = 1;

/// A command with its input paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Generate,
    Train {
        data: PathBuf,
    },
    Evaluate {
        checkpoint: PathBuf,
        data: PathBuf,
        /// Defaults to `ledger.csv` in the output directory.
        ledger: Option<PathBuf>,
    },
    Simulate {
        checkpoint: PathBuf,
        data: PathBuf,
        log: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path, recorded_as: PathBuf) -> Result<Self> {
        Ok(FileHash {
            path: recorded_as,
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub invocation: Invocation,
    pub config: RunConfig,
    /// Absolute input paths.
    pub inputs: Vec<FileHash>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<FileHash>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| InputError(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| InputError(format!("manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(InputError(format!(
                "{}: unsupported manifest {} v{}",
                path.display(),
                m.format,
                m.version
            ))
            .into());
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
