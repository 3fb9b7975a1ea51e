//! Waveform container, WAV file I/O, mu-law companding and band-limited
//! sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

/// Default number of mu-law quantization channels.
pub const DEFAULT_QUANTIZATION: usize = 256;

/// Default length of the resampling kernel in input taps.
pub const DEFAULT_RESAMPLE_TAPS: usize = 32;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("unsupported audio format: {0}")]
    Format(String),
    #[error("corrupt audio file: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid codec configuration: {0}")]
    Config(String),
    #[error("invalid waveform: {0}")]
    Invalid(String),
}

/// Mono audio at a fixed sample rate. Samples are kept within [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    rate: u32,
}

impl Waveform {
    /// Builds a waveform, clamping samples to [-1, 1].
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self, SignalError> {
        if rate == 0 {
            return Err(SignalError::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::Invalid(format!("non-finite sample at index {i}")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self { samples, rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Reads a PCM-16 or IEEE float-32 RIFF/WAVE file, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, SignalError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(SignalError::Format(format!("{channels} channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(e, path))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(e, path))?,
        (fmt, bits) => {
            return Err(SignalError::Format(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(SignalError::Corrupt(format!(
            "{}: partial frame at end of data",
            path.display()
        )));
    }
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

fn map_hound(err: hound::Error, path: &Path) -> SignalError {
    match err {
        hound::Error::IoError(e)
            if e.kind() == std::io::ErrorKind::UnexpectedEof
                || e.to_string().contains("enough bytes") =>
        {
            SignalError::Corrupt(format!("{}: truncated", path.display()))
        }
        hound::Error::IoError(e) => SignalError::Io(e),
        hound::Error::FormatError(msg) => {
            SignalError::Corrupt(format!("{}: {msg}", path.display()))
        }
        hound::Error::Unsupported => SignalError::Format(format!("{}", path.display())),
        other => SignalError::Format(format!("{}: {other}", path.display())),
    }
}

/// Converts an amplitude to a 16-bit PCM value (divisor 32768, clipped at +32767).
pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono PCM-16 little-endian WAV file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), SignalError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, path))?;
    for &s in &w.samples {
        writer.write_sample(to_pcm16(s)).map_err(|e| map_hound(e, path))?;
    }
    writer.finalize().map_err(|e| map_hound(e, path))
}

/// Mu-law compander with `channels` quantization levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MuLaw {
    channels: usize,
}

impl Default for MuLaw {
    fn default() -> Self {
        Self { channels: DEFAULT_QUANTIZATION }
    }
}

impl MuLaw {
    pub fn new(channels: usize) -> Result<Self, SignalError> {
        if channels < 4 || !channels.is_power_of_two() {
            return Err(SignalError::Config(format!(
                "quantization channels must be a power of two >= 4, got {channels}"
            )));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Companded value in [-1, 1]; inputs beyond full scale are clamped.
    pub fn compress(&self, x: f64) -> f64 {
        let q = self.channels as f64;
        let x = x.clamp(-1.0, 1.0);
        x.signum() * (1.0 + (q - 1.0) * x.abs()).ln() / q.ln()
    }

    pub fn expand(&self, y: f64) -> f64 {
        let q = self.channels as f64;
        y.signum() * (q.powf(y.abs()) - 1.0) / (q - 1.0)
    }

    pub fn encode(&self, x: f64) -> usize {
        let q = self.channels as f64;
        let y = self.compress(x);
        let code = ((y + 1.0) / 2.0 * q).floor();
        code.clamp(0.0, q - 1.0) as usize
    }

    /// Bin-center amplitude of `code`.
    pub fn decode(&self, code: usize) -> f64 {
        let q = self.channels as f64;
        let y = 2.0 * (code as f64 + 0.5) / q - 1.0;
        self.expand(y)
    }

    /// Amplitude interval `[lo, hi]` that encodes to `code`.
    pub fn bin_edges(&self, code: usize) -> (f64, f64) {
        let q = self.channels as f64;
        let lo = 2.0 * code as f64 / q - 1.0;
        let hi = 2.0 * (code as f64 + 1.0) / q - 1.0;
        (self.expand(lo), self.expand(hi))
    }

    pub fn encode_all(&self, xs: &[f64]) -> Vec<usize> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode_all(&self, codes: &[usize]) -> Vec<f64> {
        codes.iter().map(|&c| self.decode(c)).collect()
    }
}

/// Resamples `w` to `new_rate` with a windowed-sinc kernel of [`DEFAULT_RESAMPLE_TAPS`] taps.
pub fn resample(w: &Waveform, new_rate: u32) -> Result<Waveform, SignalError> {
    if new_rate == 0 {
        return Err(SignalError::Invalid("target rate must be positive".into()));
    }
    let out_len = (w.len() as f64 * new_rate as f64 / w.rate as f64).round() as usize;
    let ratio = new_rate as f64 / w.rate as f64;
    let out = resample_to_len(&w.samples, ratio, out_len, DEFAULT_RESAMPLE_TAPS);
    Waveform::new(out, new_rate)
}

/// Band-limited resampling of a raw sample buffer.
///
/// `ratio` is output samples per input sample; output sample `i` sits at
/// input position `i / ratio`. The anti-aliasing cutoff follows the lower of
/// the two Nyquist rates.
pub fn resample_to_len(x: &[f64], ratio: f64, out_len: usize, taps: usize) -> Vec<f64> {
    if x.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    if (ratio - 1.0).abs() < 1e-12 && out_len == x.len() {
        return x.to_vec();
    }
    let cutoff = ratio.min(1.0);
    let half = (taps as f64 / 2.0) / cutoff;
    let n = x.len() as isize;
    (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let lo = (t - half).ceil() as isize;
            let hi = (t + half).floor() as isize;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for k in lo..=hi {
                let d = t - k as f64;
                let wgt = cutoff * sinc(cutoff * d) * blackman(d / half);
                norm += wgt;
                if (0..n).contains(&k) {
                    acc += wgt * x[k as usize];
                }
            }
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window over normalized position `u` in [-1, 1].
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (u + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}
