use std::f64::consts::PI;

use super::fft::FftPair;
use super::{hann, padded, AnalysisConfig, AnalysisError};
use crate::signal::Waveform;

/// Pitch assumed for unvoiced frames when sizing the window and lifter.
const UNVOICED_F0: f64 = 500.0;

/// Pitch-adaptive smoothed log-amplitude envelope, `fft_size/2 + 1` bins per
/// frame.
///
/// Each frame is windowed with a Hann window three pitch periods long, its
/// power spectrum is normalized by the window energy (so a stationary signal
/// yields its power spectral density), floored, and smoothed in the cepstral
/// domain with a `sinc(q / T0)` lifter truncated at one period. The result is
/// returned as natural-log amplitude.
pub fn spectral_envelope(
    w: &Waveform,
    f0: &[f64],
    cfg: &AnalysisConfig,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    cfg.validate(w.rate())?;
    let rate = w.rate() as f64;
    let n = cfg.fft_size;
    let fft = FftPair::new(n);
    let floor_power = (2.0 * cfg.envelope_floor).exp();
    let x = w.samples();

    let mut out = Vec::with_capacity(f0.len());
    for (i, &hz) in f0.iter().enumerate() {
        let hz = if hz > 0.0 { hz } else { UNVOICED_F0 };
        let period = rate / hz;
        let len = ((3.0 * period).round() as usize).clamp(8, n);
        let window = hann(len);
        let energy: f64 = window.iter().map(|v| v * v).sum();
        let start = cfg.frame_center(i, w.rate()) - (len / 2) as isize;
        let seg: Vec<f64> =
            window.iter().enumerate().map(|(j, wv)| wv * padded(x, start + j as isize)).collect();
        let spec = fft.forward_real(&seg);
        let log_power: Vec<f64> =
            (0..=n / 2).map(|k| (spec[k].norm_sqr() / energy).max(floor_power).ln()).collect();
        let mut ceps = fft.inverse_even(&log_power);
        for q in 0..n {
            let quef = q.min(n - q) as f64;
            let lifter = if quef == 0.0 {
                1.0
            } else if quef < period {
                let a = PI * quef / period;
                a.sin() / a
            } else {
                0.0
            };
            ceps[q] *= lifter;
        }
        let smooth = fft.forward_real(&ceps);
        out.push((0..=n / 2).map(|k| 0.5 * smooth[k].re).collect());
    }
    Ok(out)
}
