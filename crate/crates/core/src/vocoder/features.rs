use serde::{Deserialize, Serialize};

use super::VocoderError;
use crate::analysis::FeatureSequence;
use crate::cyclevae::CycleVae;
use crate::f0conv::assemble_converted_features;
use crate::nn::Mat;
use crate::signal::Waveform;

/// Largest accepted distance (in samples) of `frame_shift * rate` from an
/// integer hop.
pub const HOP_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Repeat,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Natural,
    Reconstructed,
    Generated,
}

/// An analysed utterance of the training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusUtterance {
    pub id: String,
    pub speaker: String,
    pub waveform: Waveform,
    pub features: FeatureSequence,
}

/// Waveform target paired with the features the vocoder is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderUtterance {
    pub id: String,
    pub speaker: String,
    pub waveform: Waveform,
    pub features: FeatureSequence,
    pub mode: FeatureMode,
}

/// Frame-level conditioning rows `[uv, lf0, ap..., mcep...]`.
pub fn conditioning_matrix(fs: &FeatureSequence) -> Mat {
    let rows: Vec<Vec<f64>> = (0..fs.frames())
        .map(|i| {
            let mut r = Vec::with_capacity(2 + fs.ap_dim() + fs.mcep_dim());
            r.push(if fs.uv[i] { 1.0 } else { 0.0 });
            r.push(fs.lf0[i]);
            r.extend_from_slice(&fs.ap[i]);
            r.extend_from_slice(&fs.mcep[i]);
            r
        })
        .collect();
    if rows.is_empty() {
        return Mat::zeros(0, 2 + fs.ap_dim() + fs.mcep_dim());
    }
    Mat::from_rows(&rows)
}

/// One conditioning row per audio sample: `frames.rows * hop` rows.
pub fn upsample_conditioning(
    frames: &Mat,
    frame_shift: f64,
    rate: u32,
    mode: UpsampleMode,
) -> Result<Mat, VocoderError> {
    let exact = frame_shift * rate as f64;
    let hop = exact.round();
    if hop < 1.0 || (exact - hop).abs() > HOP_TOLERANCE {
        return Err(VocoderError::Config(format!(
            "frame shift {frame_shift} s at {rate} Hz is not an integral hop ({exact} samples)"
        )));
    }
    let hop = hop as usize;
    let f = frames.rows;
    let mut out = Mat::zeros(f * hop, frames.cols);
    for i in 0..f {
        let a = frames.row(i);
        let b = frames.row((i + 1).min(f.saturating_sub(1)));
        for j in 0..hop {
            let row = out.row_mut(i * hop + j);
            match mode {
                UpsampleMode::Repeat => row.copy_from_slice(a),
                UpsampleMode::Linear => {
                    let t = j as f64 / hop as f64;
                    for ((o, x), y) in row.iter_mut().zip(a).zip(b) {
                        *o = x + t * (y - x);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Training material for one vocoder stage.
///
/// Natural mode passes features through. Reconstructed and generated modes
/// replace the mel-cepstrum by the CycleVAE output for the utterance's own
/// speaker; uv, lf0 and aperiodicity stay natural, and the natural waveform
/// remains the target.
pub fn make_vocoder_features(
    corpus: &[CorpusUtterance],
    mode: FeatureMode,
    cyclevae: Option<&CycleVae>,
) -> Result<Vec<VocoderUtterance>, VocoderError> {
    let model = match (mode, cyclevae) {
        (FeatureMode::Natural, _) => None,
        (_, Some(m)) => Some(m),
        (_, None) => {
            return Err(VocoderError::MissingModel(format!("{mode:?} features need a trained CycleVAE")));
        }
    };
    corpus
        .iter()
        .map(|u| {
            let features = match model {
                None => u.features.clone(),
                Some(m) => {
                    let mcep = m.convert_mcep(&u.features.mcep, &u.speaker)?;
                    assemble_converted_features(&u.features, mcep, u.features.lf0.clone())
                        .map_err(|e| VocoderError::Alignment(e.to_string()))?
                }
            };
            Ok(VocoderUtterance {
                id: u.id.clone(),
                speaker: u.speaker.clone(),
                waveform: u.waveform.clone(),
                features,
                mode,
            })
        })
        .collect()
}
