//! Per-speaker log-F0 statistics, the linear log-F0 transform and assembly
//! of the feature vector handed to the vocoder at conversion time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::FeatureSequence;

#[derive(Debug, Error, PartialEq)]
pub enum F0Error {
    #[error("no voiced frames to collect statistics from")]
    NoVoicing,
    #[error("degenerate source statistics: std_lf0 = 0")]
    DegenerateStats,
    #[error("frame count mismatch: {0}")]
    FrameMismatch(String),
}

/// Log-F0 moments over voiced frames (natural log of Hz, population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerF0Stats {
    #[serde(default)]
    pub speaker_id: String,
    pub mean_lf0: f64,
    pub std_lf0: f64,
    pub voiced_frames: usize,
}

impl SpeakerF0Stats {
    pub fn new(speaker_id: impl Into<String>, mean_lf0: f64, std_lf0: f64, voiced_frames: usize) -> Self {
        Self { speaker_id: speaker_id.into(), mean_lf0, std_lf0, voiced_frames }
    }
}

/// Mean and population standard deviation of lf0 over voiced frames only.
pub fn collect_stats<'a, I>(speaker_id: &str, features: I) -> Result<SpeakerF0Stats, F0Error>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
{
    let mut count = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for fs in features {
        for (&v, &x) in fs.uv.iter().zip(&fs.lf0) {
            if v {
                count += 1;
                let d = x - mean;
                mean += d / count as f64;
                m2 += d * (x - mean);
            }
        }
    }
    if count == 0 {
        return Err(F0Error::NoVoicing);
    }
    Ok(SpeakerF0Stats::new(speaker_id, mean, (m2 / count as f64).max(0.0).sqrt(), count))
}

/// `mean_tgt + (std_tgt / std_src) * (x - mean_src)`.
pub fn linear_lf0_transform(x: f64, src: &SpeakerF0Stats, tgt: &SpeakerF0Stats) -> Result<f64, F0Error> {
    if !(src.std_lf0 > 0.0) {
        return Err(F0Error::DegenerateStats);
    }
    Ok(tgt.mean_lf0 + (tgt.std_lf0 / src.std_lf0) * (x - src.mean_lf0))
}

pub fn convert_lf0_sequence(
    lf0: &[f64],
    src: &SpeakerF0Stats,
    tgt: &SpeakerF0Stats,
) -> Result<Vec<f64>, F0Error> {
    lf0.iter().map(|&x| linear_lf0_transform(x, src, tgt)).collect()
}

/// Source U/V and aperiodicity with converted lf0 and mel-cepstrum.
pub fn assemble_converted_features(
    src: &FeatureSequence,
    converted_mcep: Vec<Vec<f64>>,
    converted_lf0: Vec<f64>,
) -> Result<FeatureSequence, F0Error> {
    let n = src.frames();
    if converted_mcep.len() != n || converted_lf0.len() != n || src.lf0.len() != n || src.ap.len() != n {
        return Err(F0Error::FrameMismatch(format!(
            "source {n} frames, mcep {}, lf0 {}",
            converted_mcep.len(),
            converted_lf0.len()
        )));
    }
    Ok(FeatureSequence {
        uv: src.uv.clone(),
        lf0: converted_lf0,
        ap: src.ap.clone(),
        mcep: converted_mcep,
        frame_shift: src.frame_shift,
        source_rate: src.source_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fs(uv: Vec<bool>, lf0: Vec<f64>) -> FeatureSequence {
        let n = uv.len();
        FeatureSequence {
            uv,
            lf0,
            ap: vec![vec![0.5; 2]; n],
            mcep: vec![vec![0.1, 0.2, 0.3]; n],
            frame_shift: 0.005,
            source_rate: 16000,
        }
    }

    #[test]
    fn stats_examples() {
        let s = collect_stats("a", [&fs(vec![true; 4], vec![5.0; 4])]).unwrap();
        assert_eq!((s.mean_lf0, s.std_lf0, s.voiced_frames), (5.0, 0.0, 4));
        let s = collect_stats("a", [&fs(vec![true, true, false], vec![4.0, 6.0, 99.0])]).unwrap();
        assert_eq!((s.mean_lf0, s.std_lf0, s.voiced_frames), (5.0, 1.0, 2));
        assert_eq!(collect_stats("a", [&fs(vec![false], vec![5.0])]), Err(F0Error::NoVoicing));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let utts: Vec<FeatureSequence> = (0..30)
            .map(|u| {
                let uv: Vec<bool> = (0..200).map(|i| (i * 7 + u) % 5 != 0).collect();
                let lf0: Vec<f64> = (0..200).map(|i| 5.0 + ((i * 13 + u * 31) % 97) as f64 / 300.0).collect();
                fs(uv, lf0)
            })
            .collect();
        let s = collect_stats("x", &utts).unwrap();
        let voiced: Vec<f64> = utts
            .iter()
            .flat_map(|f| f.uv.iter().zip(&f.lf0).filter(|(v, _)| **v).map(|(_, x)| *x))
            .collect();
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        let var = voiced.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / voiced.len() as f64;
        assert_eq!(s.voiced_frames, voiced.len());
        assert!((s.mean_lf0 - mean).abs() < 1e-12);
        assert!((s.std_lf0 - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn transform_examples() {
        let src = SpeakerF0Stats::new("s", 4.6, 0.2, 100);
        let tgt = SpeakerF0Stats::new("t", 5.2, 0.25, 100);
        assert!((linear_lf0_transform(4.8, &src, &tgt).unwrap() - 5.45).abs() < 1e-12);
        assert!((linear_lf0_transform(4.6, &src, &tgt).unwrap() - 5.2).abs() < 1e-12);
        assert_eq!(linear_lf0_transform(4.77, &src, &src).unwrap(), 4.77);
        let flat = SpeakerF0Stats::new("f", 4.6, 0.0, 100);
        assert_eq!(linear_lf0_transform(4.8, &flat, &tgt), Err(F0Error::DegenerateStats));
    }

    #[test]
    fn assembly_passes_through_uv_and_ap() {
        let src = fs(vec![true, false, true], vec![5.0, 5.1, 5.2]);
        let same = assemble_converted_features(&src, src.mcep.clone(), src.lf0.clone()).unwrap();
        assert_eq!(same, src);
        let conv = assemble_converted_features(&src, vec![vec![9.0; 3]; 3], vec![4.0; 3]).unwrap();
        assert_eq!(conv.uv, src.uv);
        assert_eq!(conv.ap, src.ap);
        assert_eq!(conv.lf0, vec![4.0; 3]);
        assert!(assemble_converted_features(&src, vec![vec![0.0; 3]; 2], vec![4.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn zscore_preserved_and_invertible(
            x in 3.0f64..7.0,
            ms in 3.0f64..7.0, ss in 0.05f64..1.0,
            mt in 3.0f64..7.0, st in 0.05f64..1.0,
        ) {
            let src = SpeakerF0Stats::new("s", ms, ss, 100);
            let tgt = SpeakerF0Stats::new("t", mt, st, 100);
            let y = linear_lf0_transform(x, &src, &tgt).unwrap();
            prop_assert!(((y - mt) / st - (x - ms) / ss).abs() < 1e-12);
            let back = linear_lf0_transform(y, &tgt, &src).unwrap();
            prop_assert!((back - x).abs() < 1e-12);
        }
    }
}
