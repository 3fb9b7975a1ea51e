use std::f64::consts::PI;

use super::fft::FftPair;
use super::{hann, padded, AnalysisConfig, AnalysisError};
use crate::signal::Waveform;

/// Analysis window length in pitch periods.
const PERIODS: f64 = 6.0;

/// Per-band aperiodicity in [0, 1]: the noise fraction of band energy.
///
/// Each band's normalized autocorrelation at the (fractional) pitch lag is
/// evaluated as a cosine sum over that band's power spectrum and divided by
/// the analysis window's own autocorrelation at the same lag, which undoes the
/// window taper. Unvoiced frames are 1 in every band.
pub fn band_aperiodicity(
    w: &Waveform,
    f0: &[f64],
    uv: &[bool],
    cfg: &AnalysisConfig,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if f0.len() != uv.len() {
        return Err(AnalysisError::Input("f0 and uv differ in length".into()));
    }
    cfg.validate(w.rate())?;
    let rate = w.rate() as f64;
    let bands = cfg.ap_bands;
    let x = w.samples();
    let mut plans: Vec<FftPair> = Vec::new();

    let mut out = Vec::with_capacity(f0.len());
    for (i, (&hz, &voiced)) in f0.iter().zip(uv).enumerate() {
        if !voiced || !(hz > 0.0) {
            out.push(vec![1.0; bands]);
            continue;
        }
        let period = rate / hz;
        let len = ((PERIODS * period).round() as usize).max(16);
        let n = (2 * len).next_power_of_two();
        let fft = match plans.iter().position(|p| p.size() == n) {
            Some(k) => &plans[k],
            None => {
                plans.push(FftPair::new(n));
                plans.last().unwrap()
            }
        };
        let window = hann(len);
        let start = cfg.frame_center(i, w.rate()) - (len / 2) as isize;
        let seg: Vec<f64> =
            window.iter().enumerate().map(|(j, wv)| wv * padded(x, start + j as isize)).collect();
        let spec = fft.forward_real(&seg);
        let wspec = fft.forward_real(&window);

        let phase = |k: usize| (2.0 * PI * k as f64 * period / n as f64).cos();
        let half = n / 2;
        let mut wnum = 0.0;
        let mut wden = 0.0;
        for k in 0..=half {
            let weight = if k == 0 || k == half { 1.0 } else { 2.0 };
            let p = wspec[k].norm_sqr() * weight;
            wnum += p * phase(k);
            wden += p;
        }
        let window_corr = (wnum / wden).max(1e-3);

        let mut row = vec![1.0; bands];
        let mut num = vec![0.0; bands];
        let mut den = vec![0.0; bands];
        for k in 0..=half {
            let b = ((k as f64 / half as f64) * bands as f64).floor() as usize;
            let b = b.min(bands - 1);
            let p = spec[k].norm_sqr();
            num[b] += p * phase(k);
            den[b] += p;
        }
        let total: f64 = den.iter().sum();
        for b in 0..bands {
            if den[b] > 1e-12 * total.max(1e-300) && den[b] > 1e-24 {
                let r = (num[b] / den[b]) / window_corr;
                row[b] = 1.0 - r.clamp(0.0, 1.0);
            }
        }
        out.push(row);
    }
    Ok(out)
}
