//! `run_manifest.json`: what was run, on which inputs, and when.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct InputFingerprint {
    pub path: PathBuf,
    /// First 16 bytes of SHA-256 over the directory's files, sorted by name.
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub flags: serde_json::Value,
    pub threads: usize,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputFingerprint>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub struct RunRecorder {
    command: &'static str,
    flags: serde_json::Value,
    threads: usize,
    seeds: Vec<u64>,
    inputs: Vec<InputFingerprint>,
    started: SystemTime,
}

impl RunRecorder {
    pub fn start(command: &'static str, flags: &impl Serialize, threads: usize) -> Result<Self> {
        Ok(Self {
            command,
            flags: serde_json::to_value(flags)?,
            threads,
            seeds: Vec::new(),
            inputs: Vec::new(),
            started: SystemTime::now(),
        })
    }

    pub fn seed(&mut self, seed: u64) {
        self.seeds.push(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputFingerprint {
            path: path.to_path_buf(),
            sha256: hash_path(path)?,
        });
        Ok(())
    }

    pub fn finish(self, out_dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            flags: self.flags,
            threads: self.threads,
            seeds: self.seeds,
            inputs: self.inputs,
            started_unix: unix_seconds(self.started),
            finished_unix: unix_seconds(SystemTime::now()),
        };
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_MANIFEST_FILE))
            .collect();
        files.sort();
        for f in files {
            h.update(f.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect())
}
