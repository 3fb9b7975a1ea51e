use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcc_core::analysis::AnalysisConfig;
use vcc_core::cyclevae::CycleVaeConfig;
use vcc_core::pairing::TtsCommand;
use vcc_core::vocoder::{StagePlan, VocoderConfig};
use vcc_core::wsola::TsmConfig;

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directories laid out as `<root>/<speaker>/<utterance>.wav`.
    pub corpus_roots: Vec<PathBuf>,
    pub cache_dir: PathBuf,
    /// Models, plans, manifests, augmented audio and the run log.
    pub work_dir: PathBuf,
    pub seed: u64,
    pub analysis: AnalysisConfig,
    pub cyclevae: CycleVaeConfig,
    pub cyclevae_epochs: usize,
    pub vocoder: VocoderConfig,
    pub stage_plan: Option<StagePlan>,
    pub augmentation: Option<AugmentationConfig>,
    pub pairing: Option<PairingConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Speakers whose audio is transformed.
    pub targets: Vec<String>,
    /// Speakers whose F0 register is borrowed.
    pub sources: Vec<String>,
    #[serde(default)]
    pub tsm: TsmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    /// One external text per line.
    #[serde(default)]
    pub external_texts: Option<PathBuf>,
    /// JSON object mapping content ids to transcripts.
    #[serde(default)]
    pub transcripts: Option<PathBuf>,
    #[serde(default)]
    pub tts: Option<TtsCommand>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_roots: Vec::new(),
            cache_dir: "cache".into(),
            work_dir: "work".into(),
            seed: 0,
            analysis: AnalysisConfig::default(),
            cyclevae: CycleVaeConfig::default(),
            cyclevae_epochs: 50,
            vocoder: VocoderConfig::default(),
            stage_plan: None,
            augmentation: None,
            pairing: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus_roots.iter_mut().for_each(fix);
        fix(&mut self.cache_dir);
        fix(&mut self.work_dir);
        if let Some(p) = &mut self.pairing {
            fix(&mut p.source_manifest);
            fix(&mut p.target_manifest);
            if let Some(t) = &mut p.external_texts {
                fix(t);
            }
            if let Some(t) = &mut p.transcripts {
                fix(t);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        // Rate-dependent limits are checked per file; 48 kHz is the most
        // permissive rate accepted here.
        self.analysis.validate(48000).map_err(|e| cfg_err(&e))?;
        self.cyclevae.validate().map_err(|e| cfg_err(&e))?;
        self.vocoder.validate().map_err(|e| cfg_err(&e))?;
        if self.cyclevae.mcep_dim != self.analysis.mcep_dim {
            return Err(PipelineError::Config(format!(
                "cyclevae.mcep_dim {} differs from analysis.mcep_dim {}",
                self.cyclevae.mcep_dim, self.analysis.mcep_dim
            )));
        }
        if self.cyclevae_epochs == 0 {
            return Err(PipelineError::Config("cyclevae_epochs must be positive".into()));
        }
        if let Some(a) = &self.augmentation {
            a.tsm.validate().map_err(|e| cfg_err(&e))?;
        }
        Ok(())
    }

    /// Stable digest of the configuration, for cache keys and the run log.
    pub fn digest(&self) -> String {
        crate::workspace::sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    pub fn models_dir(&self) -> PathBuf {
        self.work_dir.join("models")
    }

    pub fn augmented_dir(&self) -> PathBuf {
        self.work_dir.join("augmented")
    }
}
