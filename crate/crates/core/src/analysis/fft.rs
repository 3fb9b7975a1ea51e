use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse complex FFT pair of a fixed size.
pub(crate) struct FftPair {
    size: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { size, fwd: planner.plan_fft_forward(size), inv: planner.plan_fft_inverse(size) }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Spectrum of a real buffer (zero padded to the FFT size).
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = (0..self.size)
            .map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fwd.process(&mut buf);
        buf
    }

    /// Unnormalized inverse transform, scaled by 1/N.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<Complex64> {
        self.inv.process(&mut spec);
        let scale = 1.0 / self.size as f64;
        spec.iter_mut().for_each(|c| *c *= scale);
        spec
    }

    /// Inverse transform of a real, even half spectrum (bins 0..=N/2).
    pub fn inverse_even(&self, half: &[f64]) -> Vec<f64> {
        let n = self.size;
        let spec: Vec<Complex64> = (0..n)
            .map(|k| Complex64::new(if k <= n / 2 { half[k] } else { half[n - k] }, 0.0))
            .collect();
        self.inverse(spec).into_iter().map(|c| c.re).collect()
    }
}
