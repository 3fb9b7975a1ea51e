//! Frame-based CycleVAE over mel-cepstra.
//!
//! A speaker-independent encoder maps a ±`context_window` frame stack to a
//! Laplace posterior; the decoder maps a latent sample plus a one-hot speaker
//! code back to one frame. Each cycle reconstructs with the source code,
//! converts with the target code, re-encodes the conversion and decodes it
//! with the source code again (cyclic reconstruction). The conversion is the
//! input of the following cycle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    clip_grad_norm, Act, Adam, Checkpoint, Dense, LayerSpec, Mat, NnError, Param, Parameterized,
};

#[derive(Debug, Error)]
pub enum CycleVaeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown speaker '{0}'")]
    UnknownSpeaker(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleVaeConfig {
    pub latent_dim: usize,
    /// Frames on each side of the encoded frame.
    pub context_window: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub n_cycles: usize,
    pub kl_weight: f64,
    pub mcep_dim: usize,
    pub learning_rate: f64,
    /// Frames per training segment.
    pub segment_frames: usize,
    pub batch_segments: usize,
    pub grad_clip: f64,
    /// Utterances held out per speaker for best-checkpoint selection.
    pub dev_utterances: usize,
}

impl Default for CycleVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            context_window: 4,
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            n_cycles: 2,
            kl_weight: 0.1,
            mcep_dim: 49,
            learning_rate: 1e-3,
            segment_frames: 100,
            batch_segments: 8,
            grad_clip: 10.0,
            dev_utterances: 1,
        }
    }
}

impl CycleVaeConfig {
    pub fn validate(&self) -> Result<(), CycleVaeError> {
        let bad = |m: &str| Err(CycleVaeError::Config(m.to_string()));
        if self.n_cycles < 1 {
            return bad("n_cycles must be at least 1");
        }
        if self.latent_dim < 1 || self.mcep_dim < 1 {
            return bad("latent_dim and mcep_dim must be positive");
        }
        if !(self.kl_weight >= 0.0) {
            return bad("kl_weight must be non-negative");
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if self.segment_frames < 1 || self.batch_segments < 1 {
            return bad("segment_frames and batch_segments must be positive");
        }
        Ok(())
    }
}

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Global mean and population std over all rows.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a Vec<f64>>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&Vec<f64>> = rows.into_iter().collect();
        for r in &rows {
            n += 1;
            sum.iter_mut().zip(r.iter()).for_each(|(s, v)| *s += v);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        for r in &rows {
            sq.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let std = sq
            .iter()
            .map(|s| {
                let v = (s / n.max(1) as f64).sqrt();
                if v > 1e-8 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

/// Speaker id → one-hot index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerInventory {
    pub ids: Vec<String>,
}

impl SpeakerInventory {
    /// Sorted, deduplicated inventory.
    pub fn new<S: AsRef<str>>(ids: impl IntoIterator<Item = S>) -> Self {
        let mut v: Vec<String> = ids.into_iter().map(|s| s.as_ref().to_string()).collect();
        v.sort();
        v.dedup();
        Self { ids: v }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize, CycleVaeError> {
        self.ids.binary_search_by(|s| s.as_str().cmp(id)).map_err(|_| CycleVaeError::UnknownSpeaker(id.into()))
    }

    pub fn one_hot(&self, id: &str) -> Result<Vec<f64>, CycleVaeError> {
        let mut v = vec![0.0; self.len()];
        v[self.index_of(id)?] = 1.0;
        Ok(v)
    }
}

/// `mu - b * sign(u) * ln(1 - 2|u|)`, with `|u|` clamped below 1/2.
pub fn sample_laplace(mu: f64, b: f64, u: f64) -> f64 {
    let u = u.clamp(-0.5 + 1e-7, 0.5 - 1e-7);
    if u == 0.0 || b == 0.0 {
        return mu;
    }
    mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `KL(Laplace(mu, b) || Laplace(0, 1))` summed over dimensions.
pub fn kl_laplace_std(mu: &[f64], b: &[f64]) -> Result<f64, CycleVaeError> {
    if mu.len() != b.len() {
        return Err(CycleVaeError::Domain("mu and b lengths differ".into()));
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(b) {
        if !(s > 0.0) {
            return Err(CycleVaeError::Domain(format!("scale {s} must be positive")));
        }
        kl += kl_term(m, s);
    }
    Ok(kl)
}

fn kl_term(mu: f64, b: f64) -> f64 {
    -b.ln() + mu.abs() + b * (-mu.abs() / b).exp() - 1.0
}

/// (d/dmu, d/dlog_b) of one KL term.
fn kl_grads(mu: f64, log_b: f64) -> (f64, f64) {
    let b = log_b.exp();
    let e = (-mu.abs() / b).exp();
    (mu.signum() * (1.0 - e), -1.0 + e * (b + mu.abs()))
}

/// Tanh hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Dense>,
}

struct MlpCache {
    input: Mat,
    acts: Vec<Mat>,
}

impl Mlp {
    fn new(name: &str, dims: &[usize], zero_head: bool, rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let nm = format!("{name}.{i}");
                if zero_head && i == n - 1 {
                    Dense::zeros(&nm, dims[i], dims[i + 1])
                } else {
                    Dense::new(&nm, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    fn specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.push(l.spec());
            if i + 1 < self.layers.len() {
                v.push(LayerSpec::activation(Act::Tanh, l.out_dim()));
            }
        }
        v
    }

    fn forward(&self, x: Mat) -> Result<(Mat, MlpCache), NnError> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = self.layers[0].forward(&x)?;
        for l in &self.layers[1..] {
            let a = Act::Tanh.apply(&h);
            h = l.forward(&a)?;
            acts.push(a);
        }
        if !h.is_finite() {
            return Err(NnError::Numeric { layer: self.layers.len() - 1, detail: "non-finite output".into() });
        }
        Ok((h, MlpCache { input: x, acts }))
    }

    fn backward(&mut self, cache: &MlpCache, gy: &Mat) -> Mat {
        let mut g = gy.clone();
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            g = self.layers[i].backward(x, &g);
            if i > 0 {
                g = Act::Tanh.backward(&cache.acts[i - 1], &g);
            }
        }
        g
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Contiguous frame runs sharing a source and target speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Normalized frames, all segments stacked.
    pub x: Mat,
    /// `(start, len)` of each segment within `x`.
    pub bounds: Vec<(usize, usize)>,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Batch {
    /// Single segment with one source and one target speaker.
    pub fn single(x: Mat, src: usize, tgt: usize) -> Self {
        let n = x.rows;
        Self { x, bounds: vec![(0, n)], src: vec![src; n], tgt: vec![tgt; n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Mat,
    pub log_b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleStep {
    pub recon: Mat,
    pub conv: Mat,
    pub posterior: Posterior,
    pub cyc_posterior: Posterior,
    pub cyc_recon: Mat,
}

/// Outputs of every cycle, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutputs {
    pub cycles: Vec<CycleStep>,
}

impl CycleOutputs {
    pub fn final_cyclic_reconstruction(&self) -> &Mat {
        &self.cycles.last().expect("at least one cycle").cyc_recon
    }
}

/// Uniform(-1/2, 1/2) noise for each cycle: (posterior, cyclic posterior).
pub type CycleNoise = Vec<(Mat, Mat)>;

struct EncCache {
    mlp: MlpCache,
    mu: Mat,
    log_b: Mat,
    z: Mat,
}

struct DecCache {
    mlp: MlpCache,
}

struct StepCache {
    enc: EncCache,
    dec_x: DecCache,
    dec_y: DecCache,
    enc2: EncCache,
    dec_c: DecCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleVae {
    pub cfg: CycleVaeConfig,
    pub speakers: SpeakerInventory,
    pub norm: NormStats,
    encoder: Mlp,
    decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
    pub initial_dev_l1: f64,
    pub final_dev_l1: f64,
}

/// One utterance of training material (unnormalized mel-cepstra).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainUtterance {
    pub speaker: String,
    pub mcep: Vec<Vec<f64>>,
}

impl CycleVae {
    pub fn new(
        cfg: CycleVaeConfig,
        speakers: SpeakerInventory,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self, CycleVaeError> {
        cfg.validate()?;
        if speakers.is_empty() {
            return Err(CycleVaeError::Config("empty speaker inventory".into()));
        }
        if norm.mean.len() != cfg.mcep_dim || norm.std.len() != cfg.mcep_dim {
            return Err(CycleVaeError::Config("normalization stats do not match mcep_dim".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = (2 * cfg.context_window + 1) * cfg.mcep_dim;
        let mut enc_dims = vec![ctx];
        enc_dims.extend(&cfg.encoder_hidden);
        enc_dims.push(2 * cfg.latent_dim);
        let mut dec_dims = vec![cfg.latent_dim + speakers.len()];
        dec_dims.extend(&cfg.decoder_hidden);
        dec_dims.push(cfg.mcep_dim);
        let encoder = Mlp::new("enc", &enc_dims, true, &mut rng);
        let decoder = Mlp::new("dec", &dec_dims, false, &mut rng);
        Ok(Self { cfg, speakers, norm, encoder, decoder })
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v = self.encoder.specs();
        v.extend(self.decoder.specs());
        v
    }

    fn context(&self, x: &Mat, bounds: &[(usize, usize)]) -> Mat {
        let w = self.cfg.context_window as isize;
        let d = x.cols;
        let width = (2 * w as usize + 1) * d;
        let mut out = Mat::zeros(x.rows, width);
        for &(start, len) in bounds {
            for i in 0..len {
                let row = out.row_mut(start + i);
                for (k, off) in (-w..=w).enumerate() {
                    let j = (i as isize + off).clamp(0, len as isize - 1) as usize;
                    row[k * d..(k + 1) * d].copy_from_slice(x.row(start + j));
                }
            }
        }
        out
    }

    fn context_backward(&self, g: &Mat, bounds: &[(usize, usize)], d: usize) -> Mat {
        let w = self.cfg.context_window as isize;
        let mut gx = Mat::zeros(g.rows, d);
        for &(start, len) in bounds {
            for i in 0..len {
                let grow = g.row(start + i);
                for (k, off) in (-w..=w).enumerate() {
                    let j = (i as isize + off).clamp(0, len as isize - 1) as usize;
                    gx.row_mut(start + j).iter_mut().zip(&grow[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
        }
        gx
    }

    fn enc_forward(&self, x: &Mat, bounds: &[(usize, usize)], u: Option<&Mat>) -> Result<EncCache, NnError> {
        let (out, mlp) = self.encoder.forward(self.context(x, bounds))?;
        let l = self.cfg.latent_dim;
        let mu = out.cols_slice(0, l);
        let log_b = out.cols_slice(l, l);
        let mut z = mu.clone();
        if let Some(u) = u {
            for i in 0..z.data.len() {
                z.data[i] = sample_laplace(mu.data[i], log_b.data[i].exp(), u.data[i]);
            }
        }
        Ok(EncCache { mlp, mu, log_b, z })
    }

    /// Gradient w.r.t. the encoder input frames. `gz` flows into both mu and
    /// log_b through the reparameterization; KL gradients are added here.
    fn enc_backward(&mut self, cache: &EncCache, gz: &Mat, kl_scale: f64, bounds: &[(usize, usize)], d: usize) -> Mat {
        let l = self.cfg.latent_dim;
        let mut gout = Mat::zeros(gz.rows, 2 * l);
        for r in 0..gz.rows {
            for j in 0..l {
                let i = r * l + j;
                let (mu, lb, z) = (cache.mu.data[i], cache.log_b.data[i], cache.z.data[i]);
                let (kmu, klb) = kl_grads(mu, lb);
                let row = gout.row_mut(r);
                row[j] = gz.data[i] + kl_scale * kmu;
                row[l + j] = gz.data[i] * (z - mu) + kl_scale * klb;
            }
        }
        let gctx = self.encoder.backward(&cache.mlp, &gout);
        self.context_backward(&gctx, bounds, d)
    }

    fn dec_input(&self, z: &Mat, codes: &[usize]) -> Mat {
        let s = self.speakers.len();
        let mut onehot = Mat::zeros(z.rows, s);
        for (r, &c) in codes.iter().enumerate() {
            onehot.row_mut(r)[c] = 1.0;
        }
        Mat::hcat(&[z, &onehot])
    }

    fn dec_forward(&self, z: &Mat, codes: &[usize]) -> Result<(Mat, DecCache), NnError> {
        let (out, mlp) = self.decoder.forward(self.dec_input(z, codes))?;
        Ok((out, DecCache { mlp }))
    }

    fn dec_backward(&mut self, cache: &DecCache, g: &Mat) -> Mat {
        let gin = self.decoder.backward(&cache.mlp, g);
        gin.cols_slice(0, self.cfg.latent_dim)
    }

    fn run_cycles(&self, batch: &Batch, noise: Option<&CycleNoise>) -> Result<(CycleOutputs, Vec<StepCache>), CycleVaeError> {
        if batch.x.cols != self.cfg.mcep_dim {
            return Err(CycleVaeError::Nn(NnError::Dimension(format!(
                "batch has {} dims, model expects {}",
                batch.x.cols, self.cfg.mcep_dim
            ))));
        }
        if let Some(n) = noise {
            if n.len() != self.cfg.n_cycles {
                return Err(CycleVaeError::Usage("noise must cover every cycle".into()));
            }
        }
        let mut cycles = Vec::with_capacity(self.cfg.n_cycles);
        let mut caches = Vec::with_capacity(self.cfg.n_cycles);
        let mut input = batch.x.clone();
        for c in 0..self.cfg.n_cycles {
            let (u1, u2) = match noise {
                Some(n) => (Some(&n[c].0), Some(&n[c].1)),
                None => (None, None),
            };
            let enc = self.enc_forward(&input, &batch.bounds, u1)?;
            let (recon, dec_x) = self.dec_forward(&enc.z, &batch.src)?;
            let (conv, dec_y) = self.dec_forward(&enc.z, &batch.tgt)?;
            let enc2 = self.enc_forward(&conv, &batch.bounds, u2)?;
            let (cyc_recon, dec_c) = self.dec_forward(&enc2.z, &batch.src)?;
            cycles.push(CycleStep {
                recon,
                conv: conv.clone(),
                posterior: Posterior { mu: enc.mu.clone(), log_b: enc.log_b.clone() },
                cyc_posterior: Posterior { mu: enc2.mu.clone(), log_b: enc2.log_b.clone() },
                cyc_recon,
            });
            caches.push(StepCache { enc, dec_x, dec_y, enc2, dec_c });
            input = conv;
        }
        Ok((CycleOutputs { cycles }, caches))
    }

    /// All cycles on a normalized batch. Without noise, latents are the
    /// posterior means.
    pub fn cycle_forward(&self, batch: &Batch, noise: Option<&CycleNoise>) -> Result<CycleOutputs, CycleVaeError> {
        Ok(self.run_cycles(batch, noise)?.0)
    }

    /// Loss of a forward pass; gradients are accumulated into the model.
    pub fn loss_and_backward(&mut self, batch: &Batch, noise: Option<&CycleNoise>) -> Result<f64, CycleVaeError> {
        let (outs, caches) = self.run_cycles(batch, noise)?;
        let loss = cycle_loss(&outs, &batch.x, self.cfg.kl_weight)?;
        let n = batch.x.rows.max(1) as f64;
        let lam = self.cfg.kl_weight / n;
        let d = self.cfg.mcep_dim;
        let l1_grad = |y: &Mat| {
            let mut g = y.clone();
            for (gi, xi) in g.data.iter_mut().zip(&batch.x.data) {
                *gi = sign(*gi - xi) / n;
            }
            g
        };
        let mut g_next: Option<Mat> = None;
        for (step, cache) in outs.cycles.iter().zip(&caches).rev() {
            let gz2 = self.dec_backward(&cache.dec_c, &l1_grad(&step.cyc_recon));
            let mut g_conv = self.enc_backward(&cache.enc2, &gz2, lam, &batch.bounds, d);
            if let Some(g) = &g_next {
                g_conv.add_assign(g);
            }
            let mut gz = self.dec_backward(&cache.dec_y, &g_conv);
            gz.add_assign(&self.dec_backward(&cache.dec_x, &l1_grad(&step.recon)));
            g_next = Some(self.enc_backward(&cache.enc, &gz, lam, &batch.bounds, d));
        }
        Ok(loss)
    }

    fn check_normalized(&self, x: &Mat) -> Result<(), CycleVaeError> {
        if x.data.is_empty() {
            return Ok(());
        }
        let mean = x.data.iter().sum::<f64>() / x.data.len() as f64;
        if mean.abs() > 10.0 {
            return Err(CycleVaeError::Usage(format!("input looks unnormalized (mean {mean:.2})")));
        }
        Ok(())
    }

    /// Posterior for every frame of one normalized sequence.
    pub fn encode(&self, x: &Mat) -> Result<Posterior, CycleVaeError> {
        self.check_normalized(x)?;
        let e = self.enc_forward(x, &[(0, x.rows)], None)?;
        Ok(Posterior { mu: e.mu, log_b: e.log_b })
    }

    /// Normalized frames decoded from latents with one speaker code.
    pub fn decode(&self, z: &Mat, speaker: &str) -> Result<Mat, CycleVaeError> {
        if z.cols != self.cfg.latent_dim {
            return Err(NnError::Dimension(format!("latent has {} dims, expected {}", z.cols, self.cfg.latent_dim)).into());
        }
        let idx = self.speakers.index_of(speaker)?;
        Ok(self.dec_forward(z, &vec![idx; z.rows])?.0)
    }

    /// Converts unnormalized mel-cepstra to `tgt`, using the posterior mean.
    pub fn convert_mcep(&self, mcep: &[Vec<f64>], tgt: &str) -> Result<Vec<Vec<f64>>, CycleVaeError> {
        let idx = self.speakers.index_of(tgt)?;
        if mcep.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.normalized(mcep)?;
        self.check_normalized(&x)?;
        let enc = self.enc_forward(&x, &[(0, x.rows)], None)?;
        let (y, _) = self.dec_forward(&enc.z, &vec![idx; x.rows])?;
        Ok(y.to_rows().iter().map(|r| self.norm.denormalize(r)).collect())
    }

    fn normalized(&self, mcep: &[Vec<f64>]) -> Result<Mat, CycleVaeError> {
        if let Some(r) = mcep.iter().find(|r| r.len() != self.cfg.mcep_dim) {
            return Err(NnError::Dimension(format!("frame has {} dims, expected {}", r.len(), self.cfg.mcep_dim)).into());
        }
        Ok(Mat::from_rows(&mcep.iter().map(|r| self.norm.normalize(r)).collect::<Vec<_>>()))
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "model": "cyclevae",
            "config": self.cfg,
            "speakers": self.speakers,
            "norm": self.norm,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.metadata(), self.layer_specs(), &self.params(), None)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CycleVaeError> {
        let meta = &ck.metadata;
        if meta.get("model").and_then(|m| m.as_str()) != Some("cyclevae") {
            return Err(NnError::Checkpoint("not a CycleVAE checkpoint".into()).into());
        }
        let parse = |k: &str| meta.get(k).cloned().ok_or_else(|| NnError::Checkpoint(format!("missing {k}")));
        let de = |e: serde_json::Error| CycleVaeError::Nn(NnError::Checkpoint(e.to_string()));
        let cfg: CycleVaeConfig = serde_json::from_value(parse("config")?).map_err(de)?;
        let speakers: SpeakerInventory = serde_json::from_value(parse("speakers")?).map_err(de)?;
        let norm: NormStats = serde_json::from_value(parse("norm")?).map_err(de)?;
        let mut m = Self::new(cfg, speakers, norm, 0)?;
        ck.restore(m.params_mut(), None)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CycleVaeError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CycleVaeError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameterized for CycleVae {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over frames of the summed absolute error.
pub fn l1_distance(a: &Mat, b: &Mat) -> f64 {
    if a.rows == 0 {
        return 0.0;
    }
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.rows as f64
}

fn mean_kl(p: &Posterior) -> Result<f64, CycleVaeError> {
    let b: Vec<f64> = p.log_b.data.iter().map(|v| v.exp()).collect();
    Ok(kl_laplace_std(&p.mu.data, &b)? / p.mu.rows.max(1) as f64)
}

/// `sum_cycles [L1(recon, x) + L1(cyc_recon, x) + kl_weight * (KL(q) + KL(q~))]`,
/// with L1 and KL averaged over frames.
pub fn cycle_loss(outs: &CycleOutputs, x: &Mat, kl_weight: f64) -> Result<f64, CycleVaeError> {
    let mut total = 0.0;
    for c in &outs.cycles {
        total += l1_distance(&c.recon, x) + l1_distance(&c.cyc_recon, x);
        if kl_weight != 0.0 {
            total += kl_weight * (mean_kl(&c.posterior)? + mean_kl(&c.cyc_posterior)?);
        }
    }
    Ok(total)
}

/// Draws per-cycle uniform noise for `rows` frames.
pub fn draw_noise(rng: &mut impl Rng, cycles: usize, rows: usize, latent: usize) -> CycleNoise {
    let mut draw = || Mat::from_vec(rows, latent, (0..rows * latent).map(|_| rng.gen_range(-0.5..0.5)).collect());
    (0..cycles).map(|_| (draw(), draw())).collect()
}

struct Segment {
    utt: usize,
    start: usize,
    len: usize,
}

fn segments(utts: &[(usize, Mat)], seg: usize) -> Vec<Segment> {
    let mut v = Vec::new();
    for (u, (_, m)) in utts.iter().enumerate() {
        let mut s = 0;
        while s < m.rows {
            let len = seg.min(m.rows - s);
            v.push(Segment { utt: u, start: s, len });
            s += len;
        }
    }
    v
}

fn make_batch(utts: &[(usize, Mat)], segs: &[&Segment], tgts: &[usize]) -> Batch {
    let total: usize = segs.iter().map(|s| s.len).sum();
    let d = utts[0].1.cols;
    let mut x = Mat::zeros(total, d);
    let mut bounds = Vec::new();
    let (mut src, mut tgt) = (Vec::with_capacity(total), Vec::with_capacity(total));
    let mut at = 0;
    for (s, &t) in segs.iter().zip(tgts) {
        let (spk, m) = &utts[s.utt];
        for i in 0..s.len {
            x.row_mut(at + i).copy_from_slice(m.row(s.start + i));
        }
        bounds.push((at, s.len));
        src.extend(std::iter::repeat(*spk).take(s.len));
        tgt.extend(std::iter::repeat(t).take(s.len));
        at += s.len;
    }
    Batch { x, bounds, src, tgt }
}

/// Trains a fresh model. The last `dev_utterances` utterances of each
/// speaker form the dev set (when a speaker has more than that many); the
/// returned model holds the parameters of the epoch with the lowest dev loss.
pub fn train(
    corpus: &[TrainUtterance],
    cfg: &CycleVaeConfig,
    epochs: usize,
    seed: u64,
) -> Result<(CycleVae, TrainReport), CycleVaeError> {
    cfg.validate()?;
    if corpus.iter().all(|u| u.mcep.is_empty()) {
        return Err(CycleVaeError::EmptyCorpus);
    }
    let speakers = SpeakerInventory::new(corpus.iter().map(|u| u.speaker.as_str()));
    let norm = NormStats::fit(corpus.iter().flat_map(|u| u.mcep.iter()), cfg.mcep_dim);
    let mut model = CycleVae::new(cfg.clone(), speakers.clone(), norm, seed)?;

    let mut train_set = Vec::new();
    let mut dev_set = Vec::new();
    for spk in &speakers.ids {
        let own: Vec<&TrainUtterance> = corpus.iter().filter(|u| &u.speaker == spk && !u.mcep.is_empty()).collect();
        let n_dev = if own.len() > cfg.dev_utterances { cfg.dev_utterances } else { 0 };
        let idx = speakers.index_of(spk)?;
        for (i, u) in own.iter().enumerate() {
            let m = model.normalized(&u.mcep)?;
            if i >= own.len() - n_dev {
                dev_set.push((idx, m));
            } else {
                train_set.push((idx, m));
            }
        }
    }
    if dev_set.is_empty() {
        dev_set = train_set.clone();
    }
    let n_spk = speakers.len();
    let other = |rng: &mut ChaCha8Rng, s: usize| {
        if n_spk == 1 {
            s
        } else {
            let k = rng.gen_range(0..n_spk - 1);
            if k >= s {
                k + 1
            } else {
                k
            }
        }
    };
    let dev_batches: Vec<Batch> = dev_set
        .iter()
        .map(|(s, m)| Batch::single(m.clone(), *s, (s + 1) % n_spk))
        .collect();
    let dev_eval = |model: &CycleVae| -> Result<(f64, f64), CycleVaeError> {
        let (mut loss, mut l1, mut frames) = (0.0, 0.0, 0.0);
        for b in &dev_batches {
            let outs = model.cycle_forward(b, None)?;
            let n = b.x.rows as f64;
            loss += cycle_loss(&outs, &b.x, model.cfg.kl_weight)? * n;
            l1 += l1_distance(&outs.cycles[0].recon, &b.x) * n;
            frames += n;
        }
        Ok((loss / frames, l1 / frames))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6379_636c_6576_6165);
    let mut opt = Adam::new(cfg.learning_rate);
    let segs = segments(&train_set, cfg.segment_frames);
    let (_, initial_dev_l1) = dev_eval(&model)?;
    let mut report = TrainReport {
        train_losses: Vec::new(),
        dev_losses: Vec::new(),
        best_epoch: 0,
        initial_dev_l1,
        final_dev_l1: initial_dev_l1,
    };
    let mut best: Option<(f64, CycleVae)> = None;
    for epoch in 0..epochs {
        let mut order: Vec<&Segment> = segs.iter().collect();
        order.shuffle(&mut rng);
        let (mut sum, mut frames) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_segments) {
            let tgts: Vec<usize> = chunk.iter().map(|s| other(&mut rng, train_set[s.utt].0)).collect();
            let batch = make_batch(&train_set, chunk, &tgts);
            let noise = draw_noise(&mut rng, cfg.n_cycles, batch.x.rows, cfg.latent_dim);
            let loss = model.loss_and_backward(&batch, Some(&noise))?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(model.params_mut(), cfg.grad_clip);
            }
            opt.step(model.params_mut())?;
            sum += loss * batch.x.rows as f64;
            frames += batch.x.rows as f64;
        }
        report.train_losses.push(sum / frames.max(1.0));
        let (dev, dev_l1) = dev_eval(&model)?;
        report.dev_losses.push(dev);
        log::info!("cyclevae epoch {epoch}: train {:.4} dev {dev:.4}", sum / frames.max(1.0));
        if best.as_ref().is_none_or(|(b, _)| dev < *b) {
            report.best_epoch = epoch;
            report.final_dev_l1 = dev_l1;
            best = Some((dev, model.clone()));
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, report))
}

#[cfg(test)]
mod tests;
