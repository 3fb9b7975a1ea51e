//! Frame-level speech analysis and a parametric resynthesis path.
//!
//! The feature set per frame is a voicing flag, a continuous natural-log F0,
//! band aperiodicity and a mel-cepstrum whose coefficient 0 carries the frame
//! power. F0 is estimated with a YIN-style cumulative-mean-normalized
//! difference function, the spectral envelope is a pitch-adaptive cepstrally
//! smoothed log spectrum, and aperiodicity is the per-band noise fraction
//! derived from a window-corrected autocorrelation at the pitch lag.

mod aperiodicity;
mod cache;
mod envelope;
mod f0;
mod fft;
mod mcep;
mod synthesis;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Waveform;

pub use aperiodicity::band_aperiodicity;
pub use cache::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use envelope::spectral_envelope;
pub use f0::{continuize_lf0, estimate_f0};
pub use mcep::{envelope_from_mcep, mcep_from_envelope, McepTransform};
pub use synthesis::{synthesize_parametric, synthesize_parametric_seeded};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid analysis input: {0}")]
    Input(String),
    #[error("invalid analysis configuration: {0}")]
    Config(String),
    #[error("no voiced frames")]
    NoVoicing,
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Frame shift in seconds.
    pub frame_shift: f64,
    pub fft_size: usize,
    pub f0_floor: f64,
    pub f0_ceil: f64,
    /// First-order all-pass warping coefficient.
    pub mel_warp_alpha: f64,
    /// Number of mel-cepstral coefficients including coefficient 0.
    pub mcep_dim: usize,
    pub ap_bands: usize,
    /// Voicing threshold on the normalized difference function.
    pub voicing_threshold: f64,
    /// Natural-log amplitude floor of the spectral envelope.
    pub envelope_floor: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            frame_shift: 0.005,
            fft_size: 1024,
            f0_floor: 70.0,
            f0_ceil: 400.0,
            mel_warp_alpha: 0.466,
            mcep_dim: 49,
            ap_bands: 5,
            voicing_threshold: 0.15,
            envelope_floor: (1e-8f64).ln(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self, rate: u32) -> Result<(), AnalysisError> {
        let nyquist = rate as f64 / 2.0;
        let bad = |m: &str| Err(AnalysisError::Config(m.to_string()));
        if !(self.frame_shift > 0.0) {
            return bad("frame_shift must be positive");
        }
        if !(self.f0_floor > 0.0 && self.f0_floor < self.f0_ceil && self.f0_ceil < nyquist) {
            return bad("require 0 < f0_floor < f0_ceil < rate/2");
        }
        if !(self.mel_warp_alpha > -1.0 && self.mel_warp_alpha < 1.0) {
            return bad("mel_warp_alpha must lie in (-1, 1)");
        }
        if self.mcep_dim < 2 {
            return bad("mcep_dim must be at least 2");
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < 64 {
            return bad("fft_size must be a power of two >= 64");
        }
        if self.mcep_dim > self.fft_size / 2 {
            return bad("mcep_dim exceeds fft_size/2");
        }
        if self.ap_bands == 0 {
            return bad("ap_bands must be positive");
        }
        if (self.frame_shift * rate as f64) < 1.0 {
            return bad("frame shift shorter than one sample");
        }
        Ok(())
    }

    /// Frame hop in samples at `rate`.
    pub fn hop(&self, rate: u32) -> usize {
        (self.frame_shift * rate as f64).round().max(1.0) as usize
    }

    pub fn frame_count(&self, samples: usize, rate: u32) -> usize {
        let per = self.frame_shift * rate as f64;
        ((samples as f64 / per) + 1e-9).floor() as usize + 1
    }

    pub(crate) fn frame_center(&self, frame: usize, rate: u32) -> isize {
        (frame as f64 * self.frame_shift * rate as f64).round() as isize
    }

    pub fn envelope_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Per-frame speech features. All streams share one frame count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub uv: Vec<bool>,
    pub lf0: Vec<f64>,
    pub ap: Vec<Vec<f64>>,
    pub mcep: Vec<Vec<f64>>,
    pub frame_shift: f64,
    pub source_rate: u32,
}

impl FeatureSequence {
    pub fn frames(&self) -> usize {
        self.uv.len()
    }

    pub fn ap_dim(&self) -> usize {
        self.ap.first().map_or(0, Vec::len)
    }

    pub fn mcep_dim(&self) -> usize {
        self.mcep.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let n = self.uv.len();
        if self.lf0.len() != n || self.ap.len() != n || self.mcep.len() != n {
            return Err(AnalysisError::Input(format!(
                "stream lengths differ: uv {} lf0 {} ap {} mcep {}",
                n,
                self.lf0.len(),
                self.ap.len(),
                self.mcep.len()
            )));
        }
        let (ad, md) = (self.ap_dim(), self.mcep_dim());
        if self.ap.iter().any(|r| r.len() != ad) || self.mcep.iter().any(|r| r.len() != md) {
            return Err(AnalysisError::Input("ragged feature rows".into()));
        }
        if self.lf0.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::Input("non-finite lf0".into()));
        }
        if self.ap.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AnalysisError::Input("aperiodicity outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn voiced_count(&self) -> usize {
        self.uv.iter().filter(|&&v| v).count()
    }
}

/// Full analysis: F0 and voicing, continuous log-F0, band aperiodicity and
/// mel-cepstrum. Feature values are rounded to 32-bit precision so that a
/// cache round trip is lossless.
pub fn analyze(w: &Waveform, cfg: &AnalysisConfig) -> Result<FeatureSequence, AnalysisError> {
    cfg.validate(w.rate())?;
    let (uv, f0) = estimate_f0(w, cfg)?;
    let lf0 = continuize_lf0(&uv, &f0)?;
    let ap = band_aperiodicity(w, &f0, &uv, cfg)?;
    let env = spectral_envelope(w, &f0, cfg)?;
    let transform = McepTransform::new(cfg)?;
    let mcep = env.iter().map(|e| transform.forward(e)).collect::<Result<Vec<_>, _>>()?;
    let q = |v: f64| v as f32 as f64;
    Ok(FeatureSequence {
        uv,
        lf0: lf0.into_iter().map(q).collect(),
        ap: ap.into_iter().map(|r| r.into_iter().map(q).collect()).collect(),
        mcep: mcep.into_iter().map(|r| r.into_iter().map(q).collect()).collect(),
        frame_shift: cfg.frame_shift,
        source_rate: w.rate(),
    })
}

/// Reads samples with zeros outside the signal.
pub(crate) fn padded(x: &[f64], i: isize) -> f64 {
    if i < 0 || i as usize >= x.len() {
        0.0
    } else {
        x[i as usize]
    }
}

/// Symmetric Hann window of length `n`.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}
