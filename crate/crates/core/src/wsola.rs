//! WSOLA time-scale modification and F0-shift data augmentation.
//!
//! `f0_transform` stretches by the pitch ratio and then resamples back to the
//! original length, so pitch scales by the ratio while duration is kept.
//! Augmentation plans pair every target speaker with every source speaker and
//! name the resulting pseudo-speaker `<target>_x_<source>`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::f0conv::SpeakerF0Stats;
use crate::signal::{resample_to_len, Waveform, DEFAULT_RESAMPLE_TAPS};

pub const MIN_FACTOR: f64 = 0.25;
pub const MAX_FACTOR: f64 = 4.0;

/// Minimum voiced frames behind statistics used for a pitch ratio.
pub const MIN_STATS_FRAMES: usize = 100;

#[derive(Debug, Error)]
pub enum WsolaError {
    #[error("invalid time-scale configuration: {0}")]
    Config(String),
    #[error("speaker statistics: {0}")]
    Stats(String),
    #[error("plan serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsmConfig {
    /// Window length in seconds.
    pub window_len: f64,
    /// Fraction of the window shared by consecutive output frames.
    pub overlap: f64,
    /// Similarity search radius in seconds.
    pub search_tolerance: f64,
}

impl Default for TsmConfig {
    fn default() -> Self {
        Self { window_len: 0.025, overlap: 0.5, search_tolerance: 0.010 }
    }
}

impl TsmConfig {
    pub fn validate(&self) -> Result<(), WsolaError> {
        if !(self.window_len > 0.0) {
            return Err(WsolaError::Config("window_len must be positive".into()));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(WsolaError::Config("overlap must lie in (0, 1)".into()));
        }
        if !(self.search_tolerance >= 0.0 && self.search_tolerance < self.window_len) {
            return Err(WsolaError::Config("search_tolerance must be below window_len".into()));
        }
        Ok(())
    }
}

fn check_factor(f: f64) -> Result<(), WsolaError> {
    if !(MIN_FACTOR..=MAX_FACTOR).contains(&f) {
        return Err(WsolaError::Config(format!(
            "factor {f} outside [{MIN_FACTOR}, {MAX_FACTOR}]"
        )));
    }
    Ok(())
}

/// Time-stretches `w` to `round(factor * len)` samples without changing pitch.
pub fn wsola_stretch(w: &Waveform, factor: f64, cfg: &TsmConfig) -> Result<Waveform, WsolaError> {
    check_factor(factor)?;
    cfg.validate()?;
    let rate = w.rate() as f64;
    let x = w.samples();
    let out_len = (factor * x.len() as f64).round() as usize;
    let win = ((cfg.window_len * rate).round() as usize).max(4);
    let hop_out = ((win as f64 * (1.0 - cfg.overlap)).round() as usize).max(1);
    let hop_in = hop_out as f64 / factor;
    let tol = (cfg.search_tolerance * rate).round() as isize;
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let at = |i: isize| if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };

    let mut out = vec![0.0; out_len + win];
    let mut norm = vec![0.0; out_len + win];
    let mut prev: isize = 0;
    let mut k = 0usize;
    while k * hop_out < out_len.max(1) {
        let pos = if k == 0 {
            0
        } else {
            let nominal = (k as f64 * hop_in).round() as isize;
            let natural = prev + hop_out as isize;
            best_match(&at, natural, nominal, tol, win).unwrap_or(nominal)
        };
        let base = k * hop_out;
        for (j, wv) in window.iter().enumerate() {
            out[base + j] += wv * at(pos + j as isize);
            norm[base + j] += wv;
        }
        prev = pos;
        k += 1;
    }
    out.truncate(out_len);
    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 1e-3 {
            *o /= n;
        }
    }
    Waveform::new(out, w.rate()).map_err(|e| WsolaError::Config(e.to_string()))
}

/// Candidate start in `nominal ± tol` whose segment best matches the natural
/// continuation of the previous frame (normalized cross-correlation).
fn best_match(
    at: &impl Fn(isize) -> f64,
    natural: isize,
    nominal: isize,
    tol: isize,
    win: usize,
) -> Option<isize> {
    let template: Vec<f64> = (0..win as isize).map(|j| at(natural + j)).collect();
    let t_energy: f64 = template.iter().map(|v| v * v).sum();
    if t_energy < 1e-12 {
        return None;
    }
    let lo = (nominal - tol).max(0);
    let hi = nominal + tol;
    if lo > hi {
        return None;
    }
    let cand: Vec<f64> = (lo..hi + win as isize).map(at).collect();
    let mut energy: f64 = cand[..win].iter().map(|v| v * v).sum();
    let mut best: Option<(f64, isize)> = None;
    for (o, start) in (lo..=hi).enumerate() {
        if o > 0 {
            let out_v = cand[o - 1];
            let in_v = cand[o + win - 1];
            energy += in_v * in_v - out_v * out_v;
        }
        let dot: f64 = template.iter().zip(&cand[o..o + win]).map(|(a, b)| a * b).sum();
        let score = dot / (t_energy * energy.max(1e-12)).sqrt();
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, start));
        }
    }
    best.map(|(_, s)| s)
}

/// Scales pitch by `ratio` while keeping the sample count.
pub fn f0_transform(w: &Waveform, ratio: f64, cfg: &TsmConfig) -> Result<Waveform, WsolaError> {
    check_factor(ratio)?;
    let stretched = wsola_stretch(w, ratio, cfg)?;
    let out_len = (stretched.len() as f64 / ratio).round() as usize;
    let y = resample_to_len(stretched.samples(), 1.0 / ratio, out_len, DEFAULT_RESAMPLE_TAPS);
    Waveform::new(y, w.rate()).map_err(|e| WsolaError::Config(e.to_string()))
}

/// `exp(mean_lf0_src - mean_lf0_tgt)`: the factor that moves the target's
/// register onto the source's.
pub fn compute_f0_ratio(src: &SpeakerF0Stats, tgt: &SpeakerF0Stats) -> Result<f64, WsolaError> {
    for s in [src, tgt] {
        if s.voiced_frames < MIN_STATS_FRAMES {
            return Err(WsolaError::Stats(format!(
                "speaker '{}' has {} voiced frames, need {MIN_STATS_FRAMES}",
                s.speaker_id, s.voiced_frames
            )));
        }
    }
    Ok((src.mean_lf0 - tgt.mean_lf0).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationEntry {
    pub target_speaker_id: String,
    pub source_speaker_id: String,
    pub f0_ratio: f64,
    pub derived_speaker_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentationPlan {
    pub entries: Vec<AugmentationEntry>,
}

pub fn derived_speaker_id(target: &str, source: &str) -> String {
    format!("{target}_x_{source}")
}

pub fn build_augmentation_plan(
    targets: &[String],
    sources: &[String],
    stats: &HashMap<String, SpeakerF0Stats>,
) -> Result<AugmentationPlan, WsolaError> {
    let lookup = |id: &String| {
        stats.get(id).ok_or_else(|| WsolaError::Stats(format!("no statistics for speaker '{id}'")))
    };
    let mut entries = Vec::with_capacity(targets.len() * sources.len());
    for t in targets {
        let tgt = lookup(t)?;
        for s in sources {
            let src = lookup(s)?;
            entries.push(AugmentationEntry {
                target_speaker_id: t.clone(),
                source_speaker_id: s.clone(),
                f0_ratio: compute_f0_ratio(src, tgt)?,
                derived_speaker_id: derived_speaker_id(t, s),
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(e.derived_speaker_id.clone())) {
        return Err(WsolaError::Stats(format!("duplicate derived speaker '{}'", dup.derived_speaker_id)));
    }
    Ok(AugmentationPlan { entries })
}

impl AugmentationPlan {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), WsolaError> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, WsolaError> {
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{estimate_f0, AnalysisConfig};
    use proptest::prelude::*;

    fn tone(freq: f64, secs: f64) -> Waveform {
        let rate = 16000;
        let n = (secs * rate as f64) as usize;
        Waveform::new(
            (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect(),
            rate,
        )
        .unwrap()
    }

    fn median_f0(w: &Waveform) -> f64 {
        let (uv, f0) = estimate_f0(w, &AnalysisConfig::default()).unwrap();
        let mut v: Vec<f64> = uv.iter().zip(&f0).filter(|(u, _)| **u).map(|(_, f)| *f).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn identity_factor() {
        let w = tone(220.0, 1.0);
        let y = wsola_stretch(&w, 1.0, &TsmConfig::default()).unwrap();
        assert_eq!(y.len(), w.len());
        let dot: f64 = w.samples().iter().zip(y.samples()).map(|(a, b)| a * b).sum();
        let ncc = dot / (w.rms() * y.rms() * w.len() as f64);
        assert!(ncc > 0.95, "{ncc}");
    }

    #[test]
    fn half_factor_length() {
        let w = tone(220.0, 1.0);
        let y = wsola_stretch(&w, 0.5, &TsmConfig::default()).unwrap();
        assert_eq!(y.len(), 8000);
    }

    #[test]
    fn stretch_keeps_pitch() {
        let w = tone(220.0, 1.0);
        let y = wsola_stretch(&w, 2.0, &TsmConfig::default()).unwrap();
        let f = median_f0(&y);
        assert!((f - 220.0).abs() <= 0.03 * 220.0, "{f}");
    }

    #[test]
    fn out_of_range_factor() {
        let w = tone(220.0, 0.1);
        assert!(wsola_stretch(&w, 5.0, &TsmConfig::default()).is_err());
        assert!(f0_transform(&w, 0.1, &TsmConfig::default()).is_err());
    }

    #[test]
    fn f0_transform_doubles_pitch() {
        let w = tone(110.0, 1.0);
        let y = f0_transform(&w, 2.0, &TsmConfig::default()).unwrap();
        assert!((y.len() as f64 - w.len() as f64).abs() <= 0.02 * w.len() as f64);
        let f = median_f0(&y);
        assert!((f - 220.0).abs() <= 0.03 * 220.0, "{f}");
    }

    #[test]
    fn ratio_examples() {
        let a = SpeakerF0Stats::new("a", 5.393, 0.2, 500);
        let b = SpeakerF0Stats::new("b", 4.700, 0.2, 500);
        assert!((compute_f0_ratio(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let r = compute_f0_ratio(&a, &b).unwrap();
        assert!((r - 0.693f64.exp()).abs() < 1e-12);
        assert!((r - 2.0).abs() < 1e-3);
        let inv = compute_f0_ratio(&b, &a).unwrap();
        assert!((r * inv - 1.0).abs() < 1e-15);
        let thin = SpeakerF0Stats::new("c", 5.0, 0.1, 99);
        assert!(compute_f0_ratio(&a, &thin).is_err());
    }

    fn stats_for(ids: &[String]) -> HashMap<String, SpeakerF0Stats> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), SpeakerF0Stats::new(id.clone(), 4.6 + 0.05 * i as f64, 0.2, 1000)))
            .collect()
    }

    #[test]
    fn plan_cardinality() {
        let targets: Vec<String> = (1..=10).map(|i| format!("T{i}")).collect();
        let sources: Vec<String> = (1..=4).map(|i| format!("S{i}")).collect();
        let all: Vec<String> = targets.iter().chain(&sources).cloned().collect();
        let stats = stats_for(&all);
        let plan = build_augmentation_plan(&targets, &sources, &stats).unwrap();
        assert_eq!(plan.entries.len(), 40);
        assert_eq!(plan.entries[0].derived_speaker_id, "T1_x_S1");
        let one = build_augmentation_plan(&targets[..1], &sources[..1], &stats).unwrap();
        assert_eq!(one.entries.len(), 1);
        assert!(build_augmentation_plan(&targets, &[], &stats).unwrap().entries.is_empty());
        let missing = build_augmentation_plan(&targets, &["nobody".to_string()], &stats);
        assert!(matches!(missing, Err(WsolaError::Stats(_))));

        let mut buf = Vec::new();
        plan.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 40);
        let back = AugmentationPlan::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn pitch_behaviour_across_ratios() {
        let cfg = TsmConfig::default();
        let w = tone(150.0, 1.0);
        for r in [0.5, 0.75, 1.5, 2.0] {
            let s = wsola_stretch(&w, r, &cfg).unwrap();
            let f = median_f0(&s);
            assert!((f - 150.0).abs() <= 0.03 * 150.0, "stretch {r}: {f}");
            let p = f0_transform(&w, r, &cfg).unwrap();
            let f = median_f0(&p);
            assert!((f - 150.0 * r).abs() <= 0.03 * 150.0 * r, "shift {r}: {f}");
            assert!((p.len() as f64 - w.len() as f64).abs() <= 0.02 * w.len() as f64);
        }
    }

    #[test]
    fn shift_and_back_roundtrip() {
        let cfg = TsmConfig::default();
        let w = tone(160.0, 1.0);
        for r in [0.5, 0.75, 1.5, 2.0] {
            let y = f0_transform(&f0_transform(&w, r, &cfg).unwrap(), 1.0 / r, &cfg).unwrap();
            assert!((y.len() as f64 - w.len() as f64).abs() <= 0.04 * w.len() as f64);
            let f = median_f0(&y);
            assert!((f - 160.0).abs() <= 0.05 * 160.0, "{r}: {f}");
        }
    }

    #[test]
    fn speech_like_ratio_half() {
        let cfg = AnalysisConfig::default();
        let w = crate::analysis::testutil::vowel(220.0, 1.0, 16000);
        let mean_f0 = |w: &Waveform| {
            let (uv, f0) = estimate_f0(w, &cfg).unwrap();
            let v: Vec<f64> = uv.iter().zip(&f0).filter(|(u, _)| **u).map(|(_, f)| *f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let y = f0_transform(&w, 0.5, &TsmConfig::default()).unwrap();
        let (a, b) = (mean_f0(&w), mean_f0(&y));
        assert!((b / a - 0.5).abs() <= 0.05 * 0.5, "{a} -> {b}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn stretch_length_contract(factor in 0.5f64..2.0, secs in 0.2f64..0.8) {
            let w = tone(180.0, secs);
            let cfg = TsmConfig::default();
            let y = wsola_stretch(&w, factor, &cfg).unwrap();
            let slack = cfg.window_len * 16000.0;
            prop_assert!((y.len() as f64 - factor * w.len() as f64).abs() <= slack);
        }

        #[test]
        fn plan_size_is_product(nt in 0usize..6, ns in 0usize..6) {
            let targets: Vec<String> = (0..nt).map(|i| format!("t{i}")).collect();
            let sources: Vec<String> = (0..ns).map(|i| format!("s{i}")).collect();
            let all: Vec<String> = targets.iter().chain(&sources).cloned().collect();
            let plan = build_augmentation_plan(&targets, &sources, &stats_for(&all)).unwrap();
            prop_assert_eq!(plan.entries.len(), nt * ns);
        }
    }
}
