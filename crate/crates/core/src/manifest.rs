use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: BTreeMap<String, PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// sha256 of every artifact, keyed by path relative to `out_dir`.
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip)]
    start: Option<Instant>,
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, out_dir: &Path) -> Self {
        RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_paths: BTreeMap::new(),
            seed,
            out_dir: out_dir.to_path_buf(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_seconds: 0.0,
            artifacts: BTreeMap::new(),
            start: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, role: &str, path: Option<&Path>) {
        if let Some(p) = path {
            self.config_paths.insert(role.into(), p.to_path_buf());
        }
    }

    pub fn artifact(&mut self, relative: &str) -> Result<()> {
        let path = self.out_dir.join(relative);
        let bytes = fs::read(&path).with_context(|| format!("reading artifact {}", path.display()))?;
        self.artifacts.insert(relative.into(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Checksums every regular file below `dir` (relative to the out dir).
    pub fn artifact_tree(&mut self, dir: &str) -> Result<()> {
        let root = self.out_dir.join(dir);
        let mut stack = vec![root];
        let mut files = Vec::new();
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        for f in files {
            let rel = f.strip_prefix(&self.out_dir).unwrap_or(&f).to_string_lossy().into_owned();
            if rel != MANIFEST_FILE {
                self.artifact(&rel)?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(s) = self.start.take() {
            self.wall_clock_seconds = s.elapsed().as_secs_f64();
        }
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
