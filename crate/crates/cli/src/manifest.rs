//! Run manifests: what was run, on which inputs, producing which files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synicl::model::checkpoint::write_atomic;
use synicl::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    /// SHA-256 of the resolved configuration JSON.
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Collects input digests and output paths while a command runs.
#[derive(Debug)]
pub struct Run {
    pub out: PathBuf,
    inputs: Vec<FileDigest>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            out: out.to_path_buf(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Record an artifact written by library code.
    pub fn produced(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.artifacts.push(p.clone());
        p
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.produced(name);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut bytes = Vec::new();
        for r in rows {
            bytes.extend(serde_json::to_vec(r)?);
            bytes.push(b'\n');
        }
        self.write_bytes(name, &bytes)
    }

    /// Write `manifest.json`; the only file that carries timings.
    pub fn finish(self, command: Vec<String>, config_json: &[u8], seed: u64, secs: f64) -> Result<()> {
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config_hash: sha256_bytes(config_json),
            seed,
            inputs: self.inputs,
            artifacts: self.artifacts,
            wall_clock_secs: secs,
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        write_atomic(&self.out.join("manifest.json"), &bytes)
    }
}
