//! Per-run output directory and its completion manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 over the resolved configuration and every input file.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}

/// Collects the files written by one command. The manifest is written last
/// and atomically, so its presence marks a complete run.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    command: String,
    seed: u64,
    hasher: Sha256,
    started: String,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path, command: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let stale = dir.join(MANIFEST_FILE);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update(seed.to_le_bytes());
        Ok(Self { dir: dir.to_path_buf(), command: command.into(), seed, hasher, started: now(), outputs: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Feeds an input (serialized config or raw input file) into the hash.
    pub fn hash_input(&mut self, bytes: &[u8]) {
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(bytes);
    }

    /// Path for an output file; the file is listed in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.output(name);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: hex::encode(self.hasher.finalize()),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started: self.started,
            finished: now(),
            outputs: self.outputs,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&mut tmp, &manifest)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
