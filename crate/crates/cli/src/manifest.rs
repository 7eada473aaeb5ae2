//! Run manifest, dependency checks and the run-directory lock.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use uasml_core::io::file_digest;

pub const MANIFEST_FORMAT: &str = "uasml-run";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TIMINGS_FILE: &str = "timings.toml";
pub const LOCK_FILE: &str = "run.lock";

/// Missing, stale or corrupt upstream artifact.
#[derive(Debug)]
pub struct DependencyError(pub String);

impl fmt::Display for DependencyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dependency error: {}", self.0)
    }
}

impl std::error::Error for DependencyError {}

/// Digests of the files a stage read and wrote, keyed by run-relative path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_sha256: &str) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_sha256.into(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let m: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Some(m))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::write(Self::path(run_dir), toml::to_string(self)?)?;
        Ok(())
    }

    /// Check that `stage` was recorded and that its outputs still match their digests.
    pub fn verify_stage(&self, run_dir: &Path, stage: &str) -> std::result::Result<&StageRecord, DependencyError> {
        let rec = self
            .stages
            .get(stage)
            .ok_or_else(|| DependencyError(format!("stage `{stage}` has not been run in {}", run_dir.display())))?;
        for (rel, digest) in &rec.outputs {
            let path = run_dir.join(rel);
            match file_digest(&path) {
                Ok(found) if &found == digest => {}
                Ok(found) => {
                    return Err(DependencyError(format!("{rel}: digest {found} does not match recorded {digest}")));
                }
                Err(_) => return Err(DependencyError(format!("{rel}: missing (recorded digest {digest})"))),
            }
        }
        Ok(rec)
    }

    /// Every recorded digest that no longer matches the file on disk.
    pub fn audit(&self, run_dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for (stage, rec) in &self.stages {
            for (rel, digest) in &rec.outputs {
                match file_digest(&run_dir.join(rel)) {
                    Ok(found) if &found == digest => {}
                    Ok(_) => bad.push(format!("{stage}: {rel} modified")),
                    Err(_) => bad.push(format!("{stage}: {rel} missing")),
                }
            }
        }
        bad
    }
}

/// Digest of every file below `dir`, keyed by path relative to `run_dir`.
pub fn digest_tree(run_dir: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(relative(run_dir, &path), file_digest(&path)?);
            }
        }
    }
    Ok(out)
}

pub fn relative(run_dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(run_dir).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!("run directory {} is locked by another command (remove {} if stale)", run_dir.display(), path.display())
        })?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Wall-clock seconds per stage, kept apart from the manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn record(run_dir: &Path, stage: &str, seconds: f64) -> Result<()> {
        let path = run_dir.join(TIMINGS_FILE);
        let mut t: Timings = match fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).unwrap_or_default(),
            Err(_) => Timings::default(),
        };
        t.seconds.insert(stage.into(), seconds);
        fs::write(path, toml::to_string(&t)?)?;
        Ok(())
    }
}
