//! Shallow autoregressive softmax vocoder over mu-law samples.
//!
//! The network sees the previous sample (as its companded bin centre) and
//! per-sample conditioning, runs a stack of gated residual blocks built on
//! dilated causal convolutions, sums their skip outputs and predicts a
//! categorical distribution over the next mu-law code.

mod features;
mod model;
mod stage;

pub use features::{
    conditioning_matrix, make_vocoder_features, upsample_conditioning, CorpusUtterance, FeatureMode,
    UpsampleMode, VocoderUtterance, HOP_TOLERANCE,
};
pub use model::{Generator, Vocoder, VocoderConfig};
pub use stage::{
    checkpoint_name, early_stop_update, prepare, resolve_speakers, run_stage, run_stage_plan, split_dev,
    train_vocoder, EarlyStopState, Prepared, StageContext, StageDecision, StagePlan, StageResult, StageRunReport,
    StageSpec, TrainOptions, VocoderTrainReport, DEFAULT_PATIENCE,
};

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::cyclevae::CycleVaeError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("stage plan: {0}")]
    Plan(String),
    #[error("missing model: {0}")]
    MissingModel(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    CycleVae(#[from] CycleVaeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}
