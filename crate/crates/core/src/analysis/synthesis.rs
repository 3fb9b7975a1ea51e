use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use super::fft::FftPair;
use super::{AnalysisError, FeatureSequence, McepTransform};
use crate::signal::{SignalError, Waveform};

/// Default noise seed of [`synthesize_parametric`].
pub const SYNTHESIS_SEED: u64 = 0x5eed;

/// Parametric resynthesis with a fixed noise seed.
pub fn synthesize_parametric(
    fs: &FeatureSequence,
    alpha: f64,
    fft_size: usize,
) -> Result<Waveform, AnalysisError> {
    synthesize_parametric_seeded(fs, alpha, fft_size, SYNTHESIS_SEED)
}

/// Pulse-plus-noise source filtered by the mel-cepstral envelope.
///
/// The excitation mixes a unit-power pulse train (amplitude `sqrt(T0)`) with
/// unit-variance Gaussian noise per aperiodicity band, energy-weighted by
/// `1 - ap` and `ap`. Each frame's windowed excitation is shaped in the
/// frequency domain by `exp(envelope)` and overlap-added with a Hann window
/// spanning two hops.
pub fn synthesize_parametric_seeded(
    fs: &FeatureSequence,
    alpha: f64,
    fft_size: usize,
    seed: u64,
) -> Result<Waveform, AnalysisError> {
    fs.validate()?;
    let rate = fs.source_rate;
    let hop = ((fs.frame_shift * rate as f64).round() as usize).max(1);
    let frames = fs.frames();
    let len = frames * hop;
    if frames == 0 {
        return Ok(Waveform::new(Vec::new(), rate).map_err(sig_err)?);
    }
    let transform = McepTransform::with_params(fft_size, fs.mcep_dim(), alpha)?;
    let n = fft_size.max((4 * hop).next_power_of_two());
    let fft = FftPair::new(n);
    let bins = fft_size / 2 + 1;

    // Sample-level pitch contour: lf0 interpolated between frame centers.
    let frame_at = |i: usize| -> (usize, f64) {
        let pos = i as f64 / hop as f64;
        let lo = (pos.floor() as usize).min(frames - 1);
        (lo, pos - lo as f64)
    };
    let mut pulses = vec![0.0; len];
    let mut phase = 0.0;
    for (i, p) in pulses.iter_mut().enumerate() {
        let (lo, t) = frame_at(i);
        let hi = (lo + 1).min(frames - 1);
        let voiced = if t < 0.5 { fs.uv[lo] } else { fs.uv[hi] };
        let hz = (fs.lf0[lo] + t * (fs.lf0[hi] - fs.lf0[lo])).exp();
        phase += hz / rate as f64;
        if phase >= 1.0 {
            phase -= 1.0;
            if voiced {
                *p = (rate as f64 / hz).sqrt();
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();

    let win_len = 2 * hop;
    let window: Vec<f64> = (0..win_len)
        .map(|j| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / win_len as f64).cos())
        .collect();
    let mut out = vec![0.0; len];
    let ap_dim = fs.ap_dim().max(1);
    for f in 0..frames {
        let center = (f * hop) as isize;
        let start = center - hop as isize;
        let offset = n / 2 - hop;
        let mut pbuf = vec![0.0; n];
        let mut nbuf = vec![0.0; n];
        for (j, wv) in window.iter().enumerate() {
            let s = start + j as isize;
            if s >= 0 && (s as usize) < len {
                pbuf[offset + j] = wv * pulses[s as usize];
                nbuf[offset + j] = wv * noise[s as usize];
            }
        }
        let pspec = fft.forward_real(&pbuf);
        let nspec = fft.forward_real(&nbuf);
        let env = transform.inverse(&fs.mcep[f])?;
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..=n / 2 {
            let freq = k as f64 / (n / 2) as f64;
            let e = env[((freq * (bins - 1) as f64).round() as usize).min(bins - 1)];
            let amp = e.exp();
            let band = ((freq * ap_dim as f64) as usize).min(ap_dim - 1);
            let ap = if fs.uv[f] { fs.ap.get(f).and_then(|r| r.get(band)).copied().unwrap_or(1.0) } else { 1.0 };
            let v = amp * ((1.0 - ap).sqrt() * pspec[k] + ap.sqrt() * nspec[k]);
            y[k] = v;
            if k > 0 && k < n / 2 {
                y[n - k] = v.conj();
            }
        }
        let resp = fft.inverse(y);
        for (m, c) in resp.iter().enumerate() {
            let s = center - (n / 2) as isize + m as isize;
            if s >= 0 && (s as usize) < len {
                out[s as usize] += c.re;
            }
        }
    }
    Waveform::new(out, rate).map_err(sig_err)
}

fn sig_err(e: SignalError) -> AnalysisError {
    AnalysisError::Input(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::super::{estimate_f0, AnalysisConfig};
    use super::*;

    fn flat_features(frames: usize, hz: f64, voiced: bool, c0: f64, dim: usize) -> FeatureSequence {
        let mut mcep = vec![0.0; dim];
        mcep[0] = c0;
        mcep[1] = 0.3;
        FeatureSequence {
            uv: vec![voiced; frames],
            lf0: vec![hz.ln(); frames],
            ap: vec![vec![if voiced { 0.05 } else { 1.0 }; 5]; frames],
            mcep: vec![mcep; frames],
            frame_shift: 0.005,
            source_rate: 16000,
        }
    }

    #[test]
    fn output_length_matches_frames() {
        let fs = flat_features(100, 200.0, true, -3.0, 25);
        let w = synthesize_parametric(&fs, 0.42, 1024).unwrap();
        assert_eq!(w.len(), 100 * 80);
    }

    #[test]
    fn voiced_constant_pitch_is_recovered() {
        let fs = flat_features(200, 200.0, true, -3.0, 25);
        let w = synthesize_parametric(&fs, 0.42, 1024).unwrap();
        let cfg = AnalysisConfig::default();
        let (uv, f0) = estimate_f0(&w, &cfg).unwrap();
        let voiced: Vec<f64> = uv.iter().zip(&f0).filter(|(v, _)| **v).map(|(_, f)| *f).collect();
        assert!(voiced.len() as f64 > 0.9 * uv.len() as f64);
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        assert!((mean - 200.0).abs() <= 4.0, "{mean}");
        let within = voiced.iter().filter(|f| (*f - 200.0).abs() <= 4.0).count();
        assert!(within as f64 >= 0.95 * voiced.len() as f64);
    }

    #[test]
    fn unvoiced_features_resynthesize_unvoiced() {
        let fs = flat_features(200, 200.0, false, -3.0, 25);
        let w = synthesize_parametric(&fs, 0.42, 1024).unwrap();
        let (uv, _) = estimate_f0(&w, &AnalysisConfig::default()).unwrap();
        let unvoiced = uv.iter().filter(|v| !**v).count();
        assert!(unvoiced as f64 > 0.8 * uv.len() as f64, "{unvoiced}");
    }

    #[test]
    fn floor_power_is_near_silent() {
        let floor = AnalysisConfig::default().envelope_floor;
        let mut fs = flat_features(100, 200.0, true, floor, 25);
        fs.mcep.iter_mut().for_each(|m| m[1] = 0.0);
        let w = synthesize_parametric(&fs, 0.42, 1024).unwrap();
        assert!(w.rms() < 1e-3, "{}", w.rms());
    }
}
