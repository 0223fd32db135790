//! Run directories: an exclusive lock while a verb writes, and a `run.json`
//! recording what went in.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_FILE: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub verb: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output name to path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(verb: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            verb: verb.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(mut self, name: &str, hash: impl Into<String>) -> Self {
        self.inputs.insert(name.into(), hash.into());
        self
    }

    pub fn output(mut self, name: &str, rel: impl Into<String>) -> Self {
        self.outputs.insert(name.into(), rel.into());
        self
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Holds the run-directory lock until dropped.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed and takes its lock; a second writer fails.
    pub fn open(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { path: path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::config(format!("run directory {} is locked by another writer", path.display())))
            }
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, p: impl AsRef<Path>) -> PathBuf {
        self.path.join(p)
    }

    pub fn record(&self, rec: &RunRecord) -> Result<()> {
        let p = self.path.join(RUN_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(rec)?).map_err(|e| Error::io(&p, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(LOCK_FILE));
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
