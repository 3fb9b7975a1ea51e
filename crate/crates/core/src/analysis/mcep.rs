use std::f64::consts::PI;

use super::{AnalysisConfig, AnalysisError};

/// Maps linear frequency (radians) onto the all-pass warped axis.
pub(crate) fn warp(omega: f64, alpha: f64) -> f64 {
    omega + 2.0 * (alpha * omega.sin()).atan2(1.0 - alpha * omega.cos())
}

/// Conversion between a log-amplitude envelope on `fft_size/2 + 1` linear
/// bins and a mel-cepstrum on the all-pass warped axis.
///
/// The envelope model is `env(w) = c0 + 2 * sum_{m>=1} c_m cos(m * warp(w))`.
/// The forward direction projects the envelope, resampled on a uniform warped
/// grid, onto that cosine basis; with `alpha = 0` the grid coincides with the
/// FFT bins and the result is the truncated real cepstrum.
#[derive(Debug, Clone)]
pub struct McepTransform {
    dim: usize,
    bins: usize,
    /// Linear-axis interpolation source (lower bin, fraction) per warped grid point.
    interp: Vec<(usize, f64)>,
    /// Row m: trapezoid-weighted cos(m * warped grid) / (bins - 1).
    analysis: Vec<Vec<f64>>,
    /// Row m: basis weight of c_m at each linear bin.
    synthesis: Vec<Vec<f64>>,
}

impl McepTransform {
    pub fn new(cfg: &AnalysisConfig) -> Result<Self, AnalysisError> {
        Self::with_params(cfg.fft_size, cfg.mcep_dim, cfg.mel_warp_alpha)
    }

    pub fn with_params(fft_size: usize, dim: usize, alpha: f64) -> Result<Self, AnalysisError> {
        if dim < 1 || dim > fft_size / 2 || !(alpha.abs() < 1.0) {
            return Err(AnalysisError::Config(format!(
                "invalid mel-cepstrum setup: fft_size {fft_size}, dim {dim}, alpha {alpha}"
            )));
        }
        let bins = fft_size / 2 + 1;
        let last = (bins - 1) as f64;
        let grid: Vec<f64> = (0..bins).map(|j| PI * j as f64 / last).collect();
        let interp = grid
            .iter()
            .map(|&wt| {
                let pos = (warp(wt, -alpha) / PI * last).clamp(0.0, last);
                let lo = (pos.floor() as usize).min(bins - 2);
                (lo, pos - lo as f64)
            })
            .collect();
        let analysis = (0..dim)
            .map(|m| {
                grid.iter()
                    .enumerate()
                    .map(|(j, &wt)| {
                        let tw = if j == 0 || j == bins - 1 { 0.5 } else { 1.0 };
                        tw * (m as f64 * wt).cos() / last
                    })
                    .collect()
            })
            .collect();
        let synthesis = (0..dim)
            .map(|m| {
                let scale = if m == 0 { 1.0 } else { 2.0 };
                (0..bins).map(|k| scale * (m as f64 * warp(PI * k as f64 / last, alpha)).cos()).collect()
            })
            .collect();
        Ok(Self { dim, bins, interp, analysis, synthesis })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn forward(&self, env: &[f64]) -> Result<Vec<f64>, AnalysisError> {
        if env.len() != self.bins {
            return Err(AnalysisError::Input(format!(
                "envelope has {} bins, expected {}",
                env.len(),
                self.bins
            )));
        }
        let warped: Vec<f64> =
            self.interp.iter().map(|&(lo, t)| env[lo] + t * (env[lo + 1] - env[lo])).collect();
        Ok(self.analysis.iter().map(|row| row.iter().zip(&warped).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn inverse(&self, mcep: &[f64]) -> Result<Vec<f64>, AnalysisError> {
        if mcep.len() != self.dim {
            return Err(AnalysisError::Input(format!(
                "mel-cepstrum has {} coefficients, expected {}",
                mcep.len(),
                self.dim
            )));
        }
        let mut env = vec![0.0; self.bins];
        for (row, &c) in self.synthesis.iter().zip(mcep) {
            for (e, b) in env.iter_mut().zip(row) {
                *e += c * b;
            }
        }
        Ok(env)
    }
}

pub fn mcep_from_envelope(env: &[f64], cfg: &AnalysisConfig) -> Result<Vec<f64>, AnalysisError> {
    McepTransform::new(cfg)?.forward(env)
}

pub fn envelope_from_mcep(mcep: &[f64], cfg: &AnalysisConfig) -> Result<Vec<f64>, AnalysisError> {
    McepTransform::new(cfg)?.inverse(mcep)
}
