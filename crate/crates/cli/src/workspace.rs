use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Context, PipelineError};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).context(|| format!("renaming onto {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_vec_pretty(value).context(|| format!("serializing {}", path.display()))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read(path).context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).context(|| format!("parsing {}", path.display()))
}

/// Exclusive advisory lock on `<dir>/.lock`, held until drop.
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .context(|| format!("opening {}", path.display()))?;
        file.try_lock().map_err(|_| {
            PipelineError::Failed(format!("{} is in use by another run", dir.display()))
        })?;
        Ok(Self { _file: file })
    }
}

#[derive(Debug, Serialize)]
pub struct ArtifactHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunLogEntry<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub config_sha256: String,
    pub config: &'a crate::PipelineConfig,
    pub status: &'a str,
    pub failures: &'a [String],
    pub artifacts: Vec<ArtifactHash>,
}

/// Appends one JSON line to `<work_dir>/run_log.jsonl`.
pub fn append_run_log(work_dir: &Path, entry: &RunLogEntry<'_>) -> Result<(), PipelineError> {
    std::fs::create_dir_all(work_dir).context(|| format!("creating {}", work_dir.display()))?;
    let path = work_dir.join("run_log.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .context(|| format!("opening {}", path.display()))?;
    let mut line = serde_json::to_vec(entry).context(|| "serializing run log".into())?;
    line.push(b'\n');
    f.write_all(&line).context(|| format!("appending {}", path.display()))
}

pub fn hash_artifacts(paths: &[PathBuf]) -> Vec<ArtifactHash> {
    paths
        .iter()
        .filter_map(|p| sha256_file(p).ok().map(|h| ArtifactHash { path: p.clone(), sha256: h }))
        .collect()
}
