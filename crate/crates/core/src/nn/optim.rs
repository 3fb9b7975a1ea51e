use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Param, Parameterized};
use super::mat::Mat;
use super::NnError;

/// Adam with bias correction. The moments live on each [`Param`]; this
/// struct holds the hyperparameters and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    /// Applies one update to every parameter and zeroes the gradients.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<(), NnError> {
        self.step += 1;
        adam_step(params, self.lr, self.beta1, self.beta2, self.eps, self.step)
    }
}

/// One Adam update at 1-based step `t`.
pub fn adam_step(
    params: Vec<&mut Param>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<(), NnError> {
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for (idx, p) in params.into_iter().enumerate() {
        for i in 0..p.values.len() {
            let g = p.grad[i];
            p.adam_m[i] = beta1 * p.adam_m[i] + (1.0 - beta1) * g;
            p.adam_v[i] = beta2 * p.adam_v[i] + (1.0 - beta2) * g * g;
            let m_hat = p.adam_m[i] / c1;
            let v_hat = p.adam_v[i] / c2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            p.grad[i] = 0.0;
        }
        if !p.values.iter().all(|v| v.is_finite()) {
            return Err(NnError::Numeric {
                layer: idx,
                detail: format!("non-finite value in {} after update", p.name),
            });
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(params: Vec<&mut Param>, max_norm: f64) -> f64 {
    let norm = params.iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for r in 0..p.rows {
        let row = p.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Mean categorical cross-entropy (nats) and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Mat, targets: &[usize]) -> Result<(f64, Mat), NnError> {
    if targets.len() != logits.rows {
        return Err(NnError::Dimension(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    if logits.rows == 0 {
        return Ok((0.0, logits.clone()));
    }
    let mut grad = softmax_rows(logits);
    let n = logits.rows as f64;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(NnError::Dimension(format!("target class {t} >= {}", logits.cols)));
        }
        let row = grad.row_mut(r);
        loss -= row[t].max(f64::MIN_POSITIVE).ln();
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grad))
}

/// Finite-difference gradient verification.
///
/// `loss` must compute the scalar loss and accumulate analytic gradients into
/// the model's parameters. Up to `samples` parameter entries (chosen with
/// `seed`) are compared against central differences with step `eps`; the
/// result is the maximum of `|ga - gn| / max(|ga|, |gn|, 1e-8)`.
pub fn grad_check<M: Parameterized>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    model.zero_grad();
    loss(model);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total)).into_vec();
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (mut pi, mut off) = (0, flat);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let orig = model.params()[pi].values[off];
        model.params_mut()[pi].values[off] = orig + eps;
        let up = loss(model);
        model.params_mut()[pi].values[off] = orig - eps;
        let down = loss(model);
        model.params_mut()[pi].values[off] = orig;
        let gn = (up - down) / (2.0 * eps);
        let ga = analytic[pi][off];
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    model.zero_grad();
    worst
}
