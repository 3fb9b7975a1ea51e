use super::{padded, AnalysisConfig, AnalysisError};
use crate::signal::Waveform;

/// Mean-square floor below which a frame is treated as silent.
const SILENCE_POWER: f64 = 1e-10;

/// YIN-style F0 tracker. Returns per-frame voicing flags and F0 in Hz (0 where
/// unvoiced).
pub fn estimate_f0(
    w: &Waveform,
    cfg: &AnalysisConfig,
) -> Result<(Vec<bool>, Vec<f64>), AnalysisError> {
    if w.is_empty() {
        return Err(AnalysisError::Input("empty waveform".into()));
    }
    cfg.validate(w.rate())?;
    let rate = w.rate() as f64;
    let max_lag = (rate / cfg.f0_floor).ceil() as usize;
    let min_lag = ((rate / cfg.f0_ceil).floor() as usize).max(2);
    let win = max_lag;
    let frames = cfg.frame_count(w.len(), w.rate());
    let x = w.samples();

    let mut seg = vec![0.0; win + max_lag + 2];
    let mut diff = vec![0.0; max_lag + 2];
    let mut cmnd = vec![0.0; max_lag + 2];
    let mut uv = Vec::with_capacity(frames);
    let mut f0 = Vec::with_capacity(frames);
    for i in 0..frames {
        let start = cfg.frame_center(i, w.rate()) - ((win + max_lag) / 2) as isize;
        for (j, s) in seg.iter_mut().enumerate() {
            *s = padded(x, start + j as isize);
        }
        let power = seg[..win].iter().map(|v| v * v).sum::<f64>() / win as f64;
        let est = if power < SILENCE_POWER {
            None
        } else {
            yin_period(&seg, win, min_lag, max_lag, cfg.voicing_threshold, &mut diff, &mut cmnd)
        };
        match est.map(|p| rate / p) {
            Some(hz) if hz >= cfg.f0_floor && hz <= cfg.f0_ceil => {
                uv.push(true);
                f0.push(hz);
            }
            _ => {
                uv.push(false);
                f0.push(0.0);
            }
        }
    }
    Ok((uv, f0))
}

/// Period estimate in (fractional) samples, or `None` when no dip of the
/// normalized difference function falls below `threshold`.
fn yin_period(
    seg: &[f64],
    win: usize,
    min_lag: usize,
    max_lag: usize,
    threshold: f64,
    diff: &mut [f64],
    cmnd: &mut [f64],
) -> Option<f64> {
    let top = max_lag + 1;
    for (tau, d) in diff.iter_mut().enumerate().take(top + 1) {
        *d = if tau == 0 {
            0.0
        } else {
            seg[..win].iter().zip(&seg[tau..tau + win]).map(|(a, b)| (a - b) * (a - b)).sum()
        };
    }
    cmnd[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..=top {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 { diff[tau] * tau as f64 / running } else { 1.0 };
    }
    let mut tau = min_lag;
    while tau <= max_lag {
        if cmnd[tau] < threshold {
            while tau < max_lag && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
            return Some(tau as f64 + shift.clamp(-1.0, 1.0));
        }
        tau += 1;
    }
    None
}

/// Natural-log F0 with unvoiced gaps linearly interpolated and unvoiced edges
/// held at the nearest voiced value.
pub fn continuize_lf0(uv: &[bool], f0: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if uv.len() != f0.len() {
        return Err(AnalysisError::Input(format!(
            "uv has {} frames but f0 has {}",
            uv.len(),
            f0.len()
        )));
    }
    let voiced: Vec<usize> = (0..uv.len()).filter(|&i| uv[i]).collect();
    let (&first, &last) = match (voiced.first(), voiced.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(AnalysisError::NoVoicing),
    };
    if let Some(&i) = voiced.iter().find(|&&i| !(f0[i] > 0.0)) {
        return Err(AnalysisError::Input(format!("voiced frame {i} has non-positive f0")));
    }
    let mut out = vec![0.0; uv.len()];
    for &i in &voiced {
        out[i] = f0[i].ln();
    }
    for v in out.iter_mut().take(first) {
        *v = f0[first].ln();
    }
    for v in out.iter_mut().skip(last + 1) {
        *v = f0[last].ln();
    }
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (la, lb) = (out[a], out[b]);
        for k in a + 1..b {
            let t = (k - a) as f64 / (b - a) as f64;
            out[k] = la + t * (lb - la);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn sine_220_tracked() {
        let cfg = AnalysisConfig::default();
        let w = sine(220.0, 1.0, 16000, 0.5);
        let (uv, f0) = estimate_f0(&w, &cfg).unwrap();
        assert_eq!(uv.len(), 201);
        let voiced = uv.iter().filter(|&&v| v).count();
        assert!(voiced as f64 >= 0.95 * uv.len() as f64, "voiced {voiced}");
        for (&v, &hz) in uv.iter().zip(&f0) {
            if v {
                assert!((hz - 220.0).abs() <= 2.0, "{hz}");
            }
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let cfg = AnalysisConfig::default();
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let (uv, f0) = estimate_f0(&w, &cfg).unwrap();
        assert!(uv.iter().all(|&v| !v));
        assert!(f0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        let cfg = AnalysisConfig::default();
        let w = noise(1.0, 16000, 0.1, 7);
        let (uv, _) = estimate_f0(&w, &cfg).unwrap();
        let unvoiced = uv.iter().filter(|&&v| !v).count();
        assert!(unvoiced as f64 >= 0.8 * uv.len() as f64, "unvoiced {unvoiced}/{}", uv.len());
    }

    #[test]
    fn empty_waveform_rejected() {
        let w = Waveform::new(vec![], 16000).unwrap();
        assert!(matches!(estimate_f0(&w, &AnalysisConfig::default()), Err(AnalysisError::Input(_))));
    }

    #[test]
    fn continuize_examples() {
        let e = f64::exp;
        let lf0 = continuize_lf0(&[true, false, false, true], &[e(5.0), 0.0, 0.0, e(5.3)]).unwrap();
        for (a, b) in lf0.iter().zip([5.0, 5.1, 5.2, 5.3]) {
            assert!((a - b).abs() < 1e-12);
        }
        let lf0 = continuize_lf0(&[false, false, true], &[0.0, 0.0, e(4.7)]).unwrap();
        for a in lf0 {
            assert!((a - 4.7).abs() < 1e-12);
        }
        let f0 = [100.0, 120.0, 180.0];
        let lf0 = continuize_lf0(&[true; 3], &f0).unwrap();
        for (a, b) in lf0.iter().zip(f0) {
            assert_eq!(*a, b.ln());
        }
        assert!(matches!(continuize_lf0(&[false, false], &[0.0, 0.0]), Err(AnalysisError::NoVoicing)));
    }

    #[test]
    fn continuize_is_idempotent() {
        let uv = [false, true, false, false, true, true, false];
        let f0 = [0.0, 100.0, 0.0, 0.0, 150.0, 140.0, 0.0];
        let once = continuize_lf0(&uv, &f0).unwrap();
        let f0_again: Vec<f64> = once.iter().map(|v| v.exp()).collect();
        let twice = continuize_lf0(&uv, &f0_again).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in [1, 4, 5] {
            assert_eq!(once[i], f0[i].ln());
        }
    }
}
