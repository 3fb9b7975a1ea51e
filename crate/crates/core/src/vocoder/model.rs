use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{conditioning_matrix, upsample_conditioning, UpsampleMode};
use super::VocoderError;
use crate::analysis::FeatureSequence;
use crate::cyclevae::NormStats;
use crate::nn::{
    receptive_field, sigmoid, softmax_cross_entropy, Act, CausalConv, Checkpoint, Dense, LayerSpec, Mat, NnError,
    Param, Parameterized,
};
use crate::signal::{MuLaw, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocoderConfig {
    pub quantization: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub upsample: UpsampleMode,
    pub learning_rate: f64,
    /// Samples scored per optimizer step (plus receptive-field context).
    pub segment_samples: usize,
    pub grad_clip: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        let stack: Vec<usize> = (0..10).map(|i| 1 << i).collect();
        Self {
            quantization: 256,
            residual_channels: 64,
            skip_channels: 64,
            kernel: 2,
            dilations: [stack.clone(), stack].concat(),
            upsample: UpsampleMode::Repeat,
            learning_rate: 1e-3,
            segment_samples: 4000,
            grad_clip: 1.0,
        }
    }
}

impl VocoderConfig {
    /// The small configuration used for overfitting checks.
    pub fn tiny() -> Self {
        Self {
            residual_channels: 32,
            skip_channels: 32,
            dilations: (0..7).map(|i| 1 << i).collect(),
            learning_rate: 2e-3,
            segment_samples: 2000,
            ..Self::default()
        }
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.dilations, self.kernel)
    }

    pub fn validate(&self) -> Result<(), VocoderError> {
        MuLaw::new(self.quantization).map_err(|e| VocoderError::Config(e.to_string()))?;
        if self.dilations.is_empty() || self.dilations.contains(&0) || self.kernel < 2 {
            return Err(VocoderError::Config("need a nonempty dilation list and kernel >= 2".into()));
        }
        if self.receptive_field() < 2 {
            return Err(VocoderError::Config("receptive field must be at least 2".into()));
        }
        if self.residual_channels == 0 || self.skip_channels == 0 || self.segment_samples == 0 {
            return Err(VocoderError::Config("channel counts and segment length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: CausalConv,
    cond: Dense,
    skip: Dense,
    res: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocoder {
    pub cfg: VocoderConfig,
    pub cond_dim: usize,
    /// Frame-level conditioning normalization.
    pub cond_norm: NormStats,
    mulaw: MuLaw,
    front: Dense,
    blocks: Vec<Block>,
    post1: Dense,
    post2: Dense,
}

pub(crate) struct Cache {
    x_in: Mat,
    cond: Mat,
    res: Vec<Mat>,
    a: Vec<Mat>,
    s: Vec<Mat>,
    g: Vec<Mat>,
    r1: Mat,
    r2: Mat,
}

impl Vocoder {
    pub fn new(cfg: VocoderConfig, cond_norm: NormStats, seed: u64) -> Result<Self, VocoderError> {
        cfg.validate()?;
        let cond_dim = cond_norm.mean.len();
        if cond_dim == 0 || cond_norm.std.len() != cond_dim {
            return Err(VocoderError::Config("conditioning statistics are empty or inconsistent".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, s, q) = (cfg.residual_channels, cfg.skip_channels, cfg.quantization);
        let front = Dense::new("front", 1, r, &mut rng);
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Block {
                conv: CausalConv::new(&format!("b{i}.conv"), r, 2 * r, cfg.kernel, d, &mut rng),
                cond: Dense::new(&format!("b{i}.cond"), cond_dim, 2 * r, &mut rng),
                skip: Dense::new(&format!("b{i}.skip"), r, s, &mut rng),
                res: Dense::new(&format!("b{i}.res"), r, r, &mut rng),
            })
            .collect();
        let post1 = Dense::new("post1", s, s, &mut rng);
        let post2 = Dense::zeros("post2", s, q);
        let mulaw = MuLaw::new(q).map_err(|e| VocoderError::Config(e.to_string()))?;
        Ok(Self { cfg, cond_dim, cond_norm, mulaw, front, blocks, post1, post2 })
    }

    pub fn receptive_field(&self) -> usize {
        self.cfg.receptive_field()
    }

    pub fn mulaw(&self) -> &MuLaw {
        &self.mulaw
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let r = self.cfg.residual_channels;
        let mut v = vec![self.front.spec()];
        for b in &self.blocks {
            v.push(b.conv.spec());
            v.push(b.cond.spec());
            v.push(LayerSpec::activation(Act::Tanh, r));
            v.push(LayerSpec::activation(Act::Sigmoid, r));
            v.push(b.skip.spec());
            v.push(b.res.spec());
        }
        v.push(LayerSpec::activation(Act::Relu, self.cfg.skip_channels));
        v.push(self.post1.spec());
        v.push(LayerSpec::activation(Act::Relu, self.cfg.skip_channels));
        v.push(self.post2.spec());
        v
    }

    /// Normalized, sample-rate conditioning for a feature sequence.
    pub fn conditioning(&self, fs: &FeatureSequence) -> Result<Mat, VocoderError> {
        let frames = conditioning_matrix(fs);
        if frames.cols != self.cond_dim {
            return Err(VocoderError::Alignment(format!(
                "features give {} conditioning dims, model expects {}",
                frames.cols, self.cond_dim
            )));
        }
        let rows: Vec<Vec<f64>> = (0..frames.rows).map(|i| self.cond_norm.normalize(frames.row(i))).collect();
        let norm = if rows.is_empty() { Mat::zeros(0, self.cond_dim) } else { Mat::from_rows(&rows) };
        upsample_conditioning(&norm, fs.frame_shift, fs.source_rate, self.cfg.upsample)
    }

    /// Teacher-forcing input: row t holds the companded value of code t-1.
    pub fn input_signal(&self, codes: &[usize]) -> Mat {
        let mut x = Mat::zeros(codes.len(), 1);
        for t in 1..codes.len() {
            x.data[t] = self.code_value(codes[t - 1]);
        }
        x
    }

    fn code_value(&self, c: usize) -> f64 {
        2.0 * (c as f64 + 0.5) / self.cfg.quantization as f64 - 1.0
    }

    pub(crate) fn forward(&self, x_in: &Mat, cond: &Mat) -> Result<(Mat, Cache), VocoderError> {
        if x_in.rows != cond.rows || x_in.cols != 1 || cond.cols != self.cond_dim {
            return Err(VocoderError::Alignment(format!(
                "input {}x{} vs conditioning {}x{}",
                x_in.rows, x_in.cols, cond.rows, cond.cols
            )));
        }
        let r = self.cfg.residual_channels;
        let t_len = x_in.rows;
        let mut res = self.front.forward(x_in)?;
        let mut skip = Mat::zeros(t_len, self.cfg.skip_channels);
        let mut cache = Cache {
            x_in: x_in.clone(),
            cond: cond.clone(),
            res: Vec::new(),
            a: Vec::new(),
            s: Vec::new(),
            g: Vec::new(),
            r1: Mat::zeros(0, 0),
            r2: Mat::zeros(0, 0),
        };
        for (li, b) in self.blocks.iter().enumerate() {
            let mut h = b.conv.forward(&res)?;
            h.add_assign(&b.cond.forward(cond)?);
            let (mut a, mut s, mut g) = (Mat::zeros(t_len, r), Mat::zeros(t_len, r), Mat::zeros(t_len, r));
            for t in 0..t_len {
                let hr = h.row(t);
                for j in 0..r {
                    let av = hr[j].tanh();
                    let sv = sigmoid(hr[r + j]);
                    a.data[t * r + j] = av;
                    s.data[t * r + j] = sv;
                    g.data[t * r + j] = av * sv;
                }
            }
            skip.add_assign(&b.skip.forward(&g)?);
            let mut next = res.clone();
            next.add_assign(&b.res.forward(&g)?);
            if !next.is_finite() {
                return Err(NnError::Numeric { layer: li, detail: "non-finite residual".into() }.into());
            }
            cache.res.push(std::mem::replace(&mut res, next));
            cache.a.push(a);
            cache.s.push(s);
            cache.g.push(g);
        }
        let r1 = Act::Relu.apply(&skip);
        let r2 = Act::Relu.apply(&self.post1.forward(&r1)?);
        let logits = self.post2.forward(&r2)?;
        if !logits.is_finite() {
            return Err(NnError::Numeric { layer: self.blocks.len(), detail: "non-finite logits".into() }.into());
        }
        cache.r1 = r1;
        cache.r2 = r2;
        Ok((logits, cache))
    }

    pub(crate) fn backward(&mut self, cache: &Cache, glogits: &Mat) {
        let r = self.cfg.residual_channels;
        let g_r2 = self.post2.backward(&cache.r2, glogits);
        let g_p1 = Act::Relu.backward(&cache.r2, &g_r2);
        let g_r1 = self.post1.backward(&cache.r1, &g_p1);
        let g_skip = Act::Relu.backward(&cache.r1, &g_r1);
        let t_len = glogits.rows;
        let mut g_res = Mat::zeros(t_len, r);
        for (li, b) in self.blocks.iter_mut().enumerate().rev() {
            let g = &cache.g[li];
            let mut g_gate = b.skip.backward(g, &g_skip);
            g_gate.add_assign(&b.res.backward(g, &g_res));
            let (a, s) = (&cache.a[li], &cache.s[li]);
            let mut g_h = Mat::zeros(t_len, 2 * r);
            for t in 0..t_len {
                for j in 0..r {
                    let i = t * r + j;
                    let gg = g_gate.data[i];
                    g_h.data[t * 2 * r + j] = gg * s.data[i] * (1.0 - a.data[i] * a.data[i]);
                    g_h.data[t * 2 * r + r + j] = gg * a.data[i] * s.data[i] * (1.0 - s.data[i]);
                }
            }
            b.cond.accumulate(&cache.cond, &g_h);
            let g_in = b.conv.backward(&cache.res[li], &g_h);
            g_res.add_assign(&g_in);
        }
        self.front.accumulate(&cache.x_in, &g_res);
    }

    /// Logits for teacher-forced inputs (for probes and tests).
    pub fn logits(&self, x_in: &Mat, cond: &Mat) -> Result<Mat, VocoderError> {
        Ok(self.forward(x_in, cond)?.0)
    }

    fn check_aligned(&self, codes: &[usize], cond: &Mat) -> Result<(), VocoderError> {
        if codes.len() != cond.rows {
            return Err(VocoderError::Alignment(format!(
                "{} codes but {} conditioning rows",
                codes.len(),
                cond.rows
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| c >= self.cfg.quantization) {
            return Err(VocoderError::Alignment(format!("code {c} outside quantization range")));
        }
        Ok(())
    }

    /// Mean NLL over `[start, start + len)` using receptive-field context;
    /// optionally accumulates gradients.
    pub fn segment_nll(
        &mut self,
        codes: &[usize],
        cond: &Mat,
        start: usize,
        len: usize,
        backward: bool,
    ) -> Result<f64, VocoderError> {
        self.check_aligned(codes, cond)?;
        let end = (start + len).min(codes.len());
        if start >= end {
            return Ok(0.0);
        }
        let w0 = start.saturating_sub(self.receptive_field() - 1);
        let x_full = self.input_signal(&codes[w0..end]);
        // The first input row must see the code preceding the window.
        let mut x_in = x_full;
        if w0 > 0 {
            x_in.data[0] = self.code_value(codes[w0 - 1]);
        }
        let mut c = Mat::zeros(end - w0, cond.cols);
        for t in w0..end {
            c.row_mut(t - w0).copy_from_slice(cond.row(t));
        }
        let (logits, cache) = self.forward(&x_in, &c)?;
        let skip = start - w0;
        let scored = logits.rows - skip;
        let tail = Mat::from_vec(scored, logits.cols, logits.data[skip * logits.cols..].to_vec());
        let (loss, g_tail) = softmax_cross_entropy(&tail, &codes[start..end])?;
        if backward {
            let mut g = Mat::zeros(logits.rows, logits.cols);
            g.data[skip * logits.cols..].copy_from_slice(&g_tail.data);
            self.backward(&cache, &g);
        }
        Ok(loss)
    }

    /// Mean teacher-forced negative log-likelihood in nats per sample.
    pub fn teacher_forced_nll(&self, codes: &[usize], cond: &Mat) -> Result<f64, VocoderError> {
        self.check_aligned(codes, cond)?;
        let mut scratch = self.clone();
        let seg = self.cfg.segment_samples.max(1);
        let mut total = 0.0;
        let mut start = 0;
        while start < codes.len() {
            let len = seg.min(codes.len() - start);
            total += scratch.segment_nll(codes, cond, start, len, false)? * len as f64;
            start += len;
        }
        Ok(if codes.is_empty() { 0.0 } else { total / codes.len() as f64 })
    }

    /// Ancestral sampling at temperature 1, one sample per conditioning row.
    pub fn generate(&self, cond: &Mat, rate: u32, seed: u64) -> Result<Waveform, VocoderError> {
        if cond.cols != self.cond_dim {
            return Err(VocoderError::Alignment(format!(
                "conditioning has {} dims, model expects {}",
                cond.cols, self.cond_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = Generator::new(self);
        let mut prev = None;
        let mut out = Vec::with_capacity(cond.rows);
        let mut probs = vec![0.0; self.cfg.quantization];
        for t in 0..cond.rows {
            let logits = gen.next_logits(prev, cond.row(t));
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, l) in probs.iter_mut().zip(&logits) {
                *p = (l - max).exp();
                sum += *p;
            }
            let mut u = rng.gen::<f64>() * sum;
            let mut code = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                if u < *p {
                    code = i;
                    break;
                }
                u -= p;
            }
            out.push(self.mulaw.decode(code));
            prev = Some(code);
        }
        Waveform::new(out, rate).map_err(|e| VocoderError::Config(e.to_string()))
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "model": "vocoder",
            "config": self.cfg,
            "cond_norm": self.cond_norm,
        })
    }

    pub fn to_checkpoint(&self, optimizer: Option<&crate::nn::Adam>) -> Checkpoint {
        Checkpoint::capture(self.metadata(), self.layer_specs(), &self.params(), optimizer)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VocoderError> {
        let meta = &ck.metadata;
        if meta.get("model").and_then(|m| m.as_str()) != Some("vocoder") {
            return Err(NnError::Checkpoint("not a vocoder checkpoint".into()).into());
        }
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| NnError::Checkpoint(format!("missing {k}")));
        let cfg: VocoderConfig = serde_json::from_value(get("config")?)?;
        let norm: NormStats = serde_json::from_value(get("cond_norm")?)?;
        let mut v = Self::new(cfg, norm, 0)?;
        ck.restore(v.params_mut(), None)?;
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), VocoderError> {
        Ok(self.to_checkpoint(None).save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, VocoderError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameterized for Vocoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.front.params();
        for b in &self.blocks {
            v.extend(b.conv.params());
            v.extend(b.cond.params());
            v.extend(b.skip.params());
            v.extend(b.res.params());
        }
        v.extend(self.post1.params());
        v.extend(self.post2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.front.params_mut();
        for b in &mut self.blocks {
            v.extend(b.conv.params_mut());
            v.extend(b.cond.params_mut());
            v.extend(b.skip.params_mut());
            v.extend(b.res.params_mut());
        }
        v.extend(self.post1.params_mut());
        v.extend(self.post2.params_mut());
        v
    }
}

/// Incremental inference with per-block history rings.
pub struct Generator<'a> {
    voc: &'a Vocoder,
    rings: Vec<Vec<Vec<f64>>>,
    t: usize,
}

impl<'a> Generator<'a> {
    pub fn new(voc: &'a Vocoder) -> Self {
        let r = voc.cfg.residual_channels;
        let rings = voc
            .blocks
            .iter()
            .map(|b| vec![vec![0.0; r]; (b.conv.kernel - 1) * b.conv.dilation + 1])
            .collect();
        Self { voc, rings, t: 0 }
    }

    /// Logits for the next sample given the previous code (`None` at t = 0).
    pub fn next_logits(&mut self, prev: Option<usize>, cond: &[f64]) -> Vec<f64> {
        let v = self.voc;
        let r = v.cfg.residual_channels;
        let x = [prev.map_or(0.0, |c| v.code_value(c))];
        let mut res = vec![0.0; r];
        v.front.forward_row(&x, &mut res);
        let mut skip = vec![0.0; v.cfg.skip_channels];
        let mut h = vec![0.0; 2 * r];
        let mut hc = vec![0.0; 2 * r];
        let mut gate = vec![0.0; r];
        let mut tmp_s = vec![0.0; v.cfg.skip_channels];
        let mut tmp_r = vec![0.0; r];
        let t = self.t;
        for (b, ring) in v.blocks.iter().zip(self.rings.iter_mut()) {
            let cap = ring.len();
            ring[t % cap].copy_from_slice(&res);
            let taps: Vec<Option<&[f64]>> = (0..b.conv.kernel)
                .map(|k| t.checked_sub(k * b.conv.dilation).map(|s| ring[s % cap].as_slice()))
                .collect();
            b.conv.step(&taps, &mut h);
            b.cond.forward_row(cond, &mut hc);
            for j in 0..r {
                gate[j] = (h[j] + hc[j]).tanh() * sigmoid(h[r + j] + hc[r + j]);
            }
            b.skip.forward_row(&gate, &mut tmp_s);
            skip.iter_mut().zip(&tmp_s).for_each(|(a, b)| *a += b);
            b.res.forward_row(&gate, &mut tmp_r);
            res.iter_mut().zip(&tmp_r).for_each(|(a, b)| *a += b);
        }
        skip.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut p1 = vec![0.0; v.cfg.skip_channels];
        v.post1.forward_row(&skip, &mut p1);
        p1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut logits = vec![0.0; v.cfg.quantization];
        v.post2.forward_row(&p1, &mut logits);
        self.t += 1;
        logits
    }
}
