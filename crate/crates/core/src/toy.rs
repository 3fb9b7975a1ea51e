//! Synthetic speakers for tests, self-checks and demos.
//!
//! Every speaker utters the same vowel sequences (chosen by utterance index);
//! speakers differ by a linear log-spectral tilt and by their F0 register.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{synthesize_parametric_seeded, AnalysisConfig, AnalysisError, FeatureSequence, McepTransform};
use crate::pairing::{Manifest, UtteranceKind, UtteranceRecord};
use crate::signal::Waveform;

/// Formant (centre Hz, bandwidth Hz) tables of five vowels.
pub const VOWELS: [[(f64, f64); 4]; 5] = [
    [(730.0, 90.0), (1090.0, 110.0), (2440.0, 170.0), (3400.0, 250.0)],
    [(270.0, 60.0), (2290.0, 100.0), (3010.0, 180.0), (3700.0, 250.0)],
    [(300.0, 60.0), (870.0, 90.0), (2240.0, 150.0), (3400.0, 250.0)],
    [(530.0, 80.0), (1840.0, 100.0), (2480.0, 160.0), (3500.0, 250.0)],
    [(570.0, 80.0), (840.0, 90.0), (2410.0, 160.0), (3400.0, 250.0)],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub id: String,
    /// Log-amplitude added at Nyquist relative to DC (linear in frequency).
    pub tilt: f64,
    pub f0_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub speakers: Vec<ToySpeaker>,
    pub utterances: usize,
    pub frames_per_utterance: usize,
    pub rate: u32,
    pub analysis: AnalysisConfig,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: vec![
                ToySpeaker { id: "spkA".into(), tilt: 0.0, f0_hz: 120.0 },
                ToySpeaker { id: "spkB".into(), tilt: -1.5, f0_hz: 210.0 },
            ],
            utterances: 10,
            frames_per_utterance: 220,
            rate: 16000,
            analysis: AnalysisConfig {
                mcep_dim: 24,
                mel_warp_alpha: 0.42,
                ..AnalysisConfig::default()
            },
            seed: 7,
        }
    }
}

/// Log-amplitude of an all-pole vowel model with a -60 dB floor.
pub fn vowel_envelope(rate: f64, bins: usize, formants: &[(f64, f64)]) -> Vec<f64> {
    let mut power = vec![1.0; bins];
    for &(fc, bw) in formants {
        let r = (-PI * bw / rate).exp();
        let th = 2.0 * PI * fc / rate;
        for (k, p) in power.iter_mut().enumerate() {
            let w = PI * k as f64 / (bins - 1) as f64;
            let re = 1.0 - 2.0 * r * th.cos() * w.cos() + r * r * (2.0 * w).cos();
            let im = 2.0 * r * th.cos() * w.sin() - r * r * (2.0 * w).sin();
            *p /= re * re + im * im;
        }
    }
    let peak = power.iter().cloned().fold(0.0, f64::max);
    // Peak normalized to a moderate level so resynthesis stays within [-1, 1].
    power.iter().map(|p| 0.5 * (p / peak + 1e-6).ln() - 4.0).collect()
}

/// Mel-cepstra of the five vowels with a speaker tilt applied.
pub fn vowel_mceps(cfg: &AnalysisConfig, rate: u32, tilt: f64) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let t = McepTransform::new(cfg)?;
    let bins = cfg.envelope_bins();
    VOWELS
        .iter()
        .map(|f| {
            let env: Vec<f64> = vowel_envelope(rate as f64, bins, f)
                .iter()
                .enumerate()
                .map(|(k, e)| e + tilt * k as f64 / (bins - 1) as f64)
                .collect();
            t.forward(&env)
        })
        .collect()
}

/// Vowel index and interpolation weight per frame for utterance `utt`.
fn vowel_track(seed: u64, utt: usize, frames: usize) -> Vec<(usize, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(utt as u64));
    let mut targets = Vec::new();
    let mut total = 0;
    while total < frames + 60 {
        let v = rng.gen_range(0..VOWELS.len());
        let dur = rng.gen_range(20..45);
        targets.push((v, dur));
        total += dur;
    }
    let mut out = Vec::with_capacity(frames);
    for w in targets.windows(2) {
        let ((a, dur), (b, _)) = (w[0], w[1]);
        for k in 0..dur {
            if out.len() == frames {
                return out;
            }
            // Hold, then a 10-frame glide into the next vowel.
            let glide = (k as f64 - (dur as f64 - 10.0)).max(0.0) / 10.0;
            out.push((a, b, glide));
        }
    }
    out
}

/// Feature sequences per speaker; utterance `u` has the same vowel track for
/// every speaker.
pub fn toy_features(cfg: &ToyCorpusConfig) -> Result<Vec<(String, Vec<FeatureSequence>)>, AnalysisError> {
    let mut out = Vec::new();
    for spk in &cfg.speakers {
        let vm = vowel_mceps(&cfg.analysis, cfg.rate, spk.tilt)?;
        let mut utts = Vec::new();
        for u in 0..cfg.utterances {
            let track = vowel_track(cfg.seed, u, cfg.frames_per_utterance);
            let n = track.len();
            let mut fs = FeatureSequence {
                uv: Vec::with_capacity(n),
                lf0: Vec::with_capacity(n),
                ap: Vec::with_capacity(n),
                mcep: Vec::with_capacity(n),
                frame_shift: cfg.analysis.frame_shift,
                source_rate: cfg.rate,
            };
            for (i, &(a, b, g)) in track.iter().enumerate() {
                let edge = i < 4 || i + 4 >= n;
                let vib = 1.0 + 0.03 * (2.0 * PI * i as f64 / 60.0 + u as f64).sin();
                fs.uv.push(!edge);
                fs.lf0.push((spk.f0_hz * vib).ln());
                fs.ap.push(vec![if edge { 1.0 } else { 0.05 }; cfg.analysis.ap_bands]);
                fs.mcep.push(vm[a].iter().zip(&vm[b]).map(|(x, y)| x + g * (y - x)).collect());
            }
            utts.push(fs);
        }
        out.push((spk.id.clone(), utts));
    }
    Ok(out)
}

/// Waveforms resynthesized from [`toy_features`].
pub fn toy_waveforms(cfg: &ToyCorpusConfig) -> Result<Vec<(String, Vec<Waveform>)>, AnalysisError> {
    toy_features(cfg)?
        .into_iter()
        .enumerate()
        .map(|(s, (id, feats))| {
            let waves = feats
                .iter()
                .enumerate()
                .map(|(u, f)| {
                    synthesize_parametric_seeded(
                        f,
                        cfg.analysis.mel_warp_alpha,
                        cfg.analysis.fft_size,
                        cfg.seed ^ ((s as u64) << 32 | u as u64),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((id, waves))
        })
        .collect()
}

/// Sustained vowel at a constant F0 and flat aperiodicity, for vocoder
/// experiments.
pub fn sustained_vowel(
    f0_hz: f64,
    frames: usize,
    vowel: usize,
    aperiodicity: f64,
    analysis: &AnalysisConfig,
    rate: u32,
) -> Result<(FeatureSequence, Waveform), AnalysisError> {
    let m = vowel_mceps(analysis, rate, 0.0)?[vowel % VOWELS.len()].clone();
    let fs = FeatureSequence {
        uv: vec![true; frames],
        lf0: vec![f0_hz.ln(); frames],
        ap: vec![vec![aperiodicity; analysis.ap_bands]; frames],
        mcep: vec![m; frames],
        frame_shift: analysis.frame_shift,
        source_rate: rate,
    };
    let w = synthesize_parametric_seeded(&fs, analysis.mel_warp_alpha, analysis.fft_size, 11)?;
    Ok((fs, w))
}

/// Source/target manifests of a semiparallel layout: `shared` contents
/// recorded by both speakers, `source_only`/`target_only` natural contents
/// each completed by a pseudo counterpart on the other side, and `external`
/// texts synthesized for both.
pub fn semiparallel_manifests(
    shared: usize,
    source_only: usize,
    target_only: usize,
    external: usize,
) -> (Manifest, Manifest) {
    use UtteranceKind::*;
    let (s, t) = ("SRC", "TGT");
    let rec = |spk: &str, c: &str, k| UtteranceRecord::new(spk, c, k, format!("{spk}/{c}.wav"));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..shared {
        let c = format!("p{i:04}");
        a.push(rec(s, &c, Natural));
        b.push(rec(t, &c, Natural));
    }
    for i in 0..source_only {
        let c = format!("s{i:04}");
        a.push(rec(s, &c, Natural));
        b.push(rec(t, &c, SyntheticPseudo));
    }
    for i in 0..target_only {
        let c = format!("t{i:04}");
        b.push(rec(t, &c, Natural));
        a.push(rec(s, &c, SyntheticPseudo));
    }
    for i in 0..external {
        let c = format!("e{i:05}");
        a.push(rec(s, &c, SyntheticExternal));
        b.push(rec(t, &c, SyntheticExternal));
    }
    (Manifest::new(a).expect("unique records"), Manifest::new(b).expect("unique records"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speakers_share_vowel_tracks() {
        let cfg = ToyCorpusConfig { utterances: 2, frames_per_utterance: 50, ..Default::default() };
        let feats = toy_features(&cfg).unwrap();
        assert_eq!(feats.len(), 2);
        let (a, b) = (&feats[0].1[1], &feats[1].1[1]);
        assert_eq!(a.frames(), 50);
        assert_eq!(a.uv, b.uv);
        // Tilt differences are identical on every frame.
        let d0: Vec<f64> = a.mcep[10].iter().zip(&b.mcep[10]).map(|(x, y)| x - y).collect();
        let d1: Vec<f64> = a.mcep[40].iter().zip(&b.mcep[40]).map(|(x, y)| x - y).collect();
        for (x, y) in d0.iter().zip(&d1) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn waveforms_are_bounded_and_sized() {
        let cfg = ToyCorpusConfig { utterances: 1, frames_per_utterance: 40, ..Default::default() };
        let w = toy_waveforms(&cfg).unwrap();
        let x = &w[0].1[0];
        assert_eq!(x.len(), 40 * 80);
        assert!(x.rms() > 1e-3);
        assert!(x.samples().iter().all(|v| v.abs() < 1.0));
    }
}
