use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcc_core::analysis::{AnalysisConfig, FeatureSequence};

use crate::error::{Context, PipelineError};
use crate::workspace::{read_json, sha256_hex, write_atomic, write_json};

/// One discovered recording.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct WavEntry {
    pub speaker: String,
    pub id: String,
    pub path: PathBuf,
}

/// Finds `<root>/<speaker>/<id>.wav` files, optionally filtered by a glob on
/// `<speaker>/<id>.wav`, in a stable order.
pub fn discover(roots: &[PathBuf], filter: Option<&glob::Pattern>) -> Result<Vec<WavEntry>, PipelineError> {
    let mut out = Vec::new();
    for root in roots {
        if !root.is_dir() {
            return Err(PipelineError::Config(format!("corpus root {} is not a directory", root.display())));
        }
        for e in walkdir::WalkDir::new(root).min_depth(2).max_depth(2).sort_by_file_name() {
            let e = e.context(|| format!("scanning {}", root.display()))?;
            let p = e.path();
            if !e.file_type().is_file() || p.extension().and_then(|x| x.to_str()) != Some("wav") {
                continue;
            }
            let speaker = p.parent().and_then(|d| d.file_name()).and_then(|s| s.to_str());
            let id = p.file_stem().and_then(|s| s.to_str());
            let (Some(speaker), Some(id)) = (speaker, id) else { continue };
            if let Some(f) = filter {
                if !f.matches(&format!("{speaker}/{id}.wav")) {
                    continue;
                }
            }
            out.push(WavEntry { speaker: speaker.into(), id: id.into(), path: p.to_path_buf() });
        }
    }
    out.sort();
    Ok(out)
}

pub fn by_speaker(entries: &[WavEntry]) -> BTreeMap<String, Vec<&WavEntry>> {
    let mut m: BTreeMap<String, Vec<&WavEntry>> = BTreeMap::new();
    for e in entries {
        m.entry(e.speaker.clone()).or_default().push(e);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheKey {
    audio_sha256: String,
    analysis_sha256: String,
}

/// Feature files keyed by audio content and analysis settings.
pub struct FeatureCache {
    dir: PathBuf,
    analysis_sha256: String,
}

impl FeatureCache {
    pub fn new(cache_dir: &Path, analysis: &AnalysisConfig) -> Self {
        let text = serde_json::to_string(analysis).unwrap_or_default();
        Self { dir: cache_dir.join("features"), analysis_sha256: sha256_hex(text.as_bytes()) }
    }

    fn paths(&self, e: &WavEntry) -> (PathBuf, PathBuf) {
        let d = self.dir.join(&e.speaker);
        (d.join(format!("{}.json", e.id)), d.join(format!("{}.key", e.id)))
    }

    pub fn features_path(&self, e: &WavEntry) -> PathBuf {
        self.paths(e).0
    }

    /// True when a stored entry matches `audio_sha256` and the settings.
    pub fn is_fresh(&self, e: &WavEntry, audio_sha256: &str) -> bool {
        let (feat, key) = self.paths(e);
        feat.exists()
            && read_json::<CacheKey>(&key)
                .map(|k| k.audio_sha256 == audio_sha256 && k.analysis_sha256 == self.analysis_sha256)
                .unwrap_or(false)
    }

    pub fn store(&self, e: &WavEntry, audio_sha256: &str, fs: &FeatureSequence) -> Result<PathBuf, PipelineError> {
        let (feat, key) = self.paths(e);
        let bytes = serde_json::to_vec(fs).context(|| format!("serializing features of {}", e.id))?;
        write_atomic(&feat, &bytes)?;
        write_json(
            &key,
            &CacheKey { audio_sha256: audio_sha256.into(), analysis_sha256: self.analysis_sha256.clone() },
        )?;
        Ok(feat)
    }

    pub fn load(&self, e: &WavEntry) -> Result<FeatureSequence, PipelineError> {
        let (feat, _) = self.paths(e);
        if !feat.exists() {
            return Err(PipelineError::Failed(format!(
                "no cached features for {}/{}; run `vcc extract` first",
                e.speaker, e.id
            )));
        }
        read_json(&feat)
    }
}
