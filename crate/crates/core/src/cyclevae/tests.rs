use proptest::prelude::*;

use rand::Rng;

use super::*;
use crate::nn::grad_check;

fn tiny_cfg() -> CycleVaeConfig {
    CycleVaeConfig {
        latent_dim: 3,
        context_window: 1,
        encoder_hidden: vec![6],
        decoder_hidden: vec![5],
        n_cycles: 2,
        kl_weight: 0.1,
        mcep_dim: 4,
        ..Default::default()
    }
}

fn inventory() -> SpeakerInventory {
    SpeakerInventory::new(["a", "b", "c"])
}

fn tiny_model(seed: u64) -> CycleVae {
    CycleVae::new(tiny_cfg(), inventory(), NormStats::identity(4), seed).unwrap()
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Randomizes the zero-initialized encoder head so posteriors are non-trivial.
fn perturb_head(m: &mut CycleVae, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        if p.name.starts_with("enc.1") {
            p.values.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
}

/// KL(L(mu, b) || L(0, 1)) by direct numerical integration of
/// `p(z) (ln p(z) - ln q(z))` with composite Simpson between kinks.
pub(crate) fn kl_numeric(mu: f64, b: f64) -> f64 {
    let ln_p = |z: f64| -(2.0 * b).ln() - (z - mu).abs() / b;
    let ln_q = |z: f64| -(2.0f64).ln() - z.abs();
    let f = |z: f64| ln_p(z).exp() * (ln_p(z) - ln_q(z));
    let lo = mu.min(0.0) - 60.0 * b.max(1.0);
    let hi = mu.max(0.0) + 60.0 * b.max(1.0);
    let mut knots = vec![lo, mu.min(0.0), mu.max(0.0), hi];
    knots.dedup();
    let simpson = |a: f64, c: f64| {
        let n = 20000;
        let h = (c - a) / n as f64;
        let mut s = f(a) + f(c);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    knots.windows(2).filter(|w| w[1] > w[0]).map(|w| simpson(w[0], w[1])).sum()
}

#[test]
fn zero_input_zero_head_gives_standard_posterior() {
    let m = tiny_model(1);
    let post = m.encode(&Mat::zeros(5, 4)).unwrap();
    assert!(post.mu.data.iter().all(|v| *v == 0.0));
    assert!(post.log_b.data.iter().all(|v| *v == 0.0));
    assert_eq!(post.mu.rows, 5);
}

#[test]
fn encode_rejects_unnormalized_input() {
    let m = tiny_model(1);
    let x = Mat::from_vec(2, 4, vec![50.0; 8]);
    assert!(matches!(m.encode(&x), Err(CycleVaeError::Usage(_))));
}

#[test]
fn encode_preserves_order() {
    let mut m = tiny_model(2);
    perturb_head(&mut m, 3);
    let x = random_mat(6, 4, 4);
    // Context 1: frame 3 sees frames 2..=4, so a batch of those frames with
    // clamped edges reproduces the middle posterior.
    let all = m.encode(&x).unwrap();
    let mut mid = Mat::zeros(3, 4);
    for i in 0..3 {
        mid.row_mut(i).copy_from_slice(x.row(2 + i));
    }
    let part = m.encode(&mid).unwrap();
    assert_eq!(part.mu.row(1), all.mu.row(3));
}

#[test]
fn laplace_sampling_examples() {
    assert_eq!(sample_laplace(0.7, 0.0, 0.3), 0.7);
    assert_eq!(sample_laplace(-1.2, 3.0, 0.0), -1.2);
    assert!(sample_laplace(0.0, 1.0, 0.5).is_finite());
    assert!(sample_laplace(0.0, 1.0, -0.5).is_finite());
}

#[test]
fn laplace_sampling_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1_000_000;
    let (mut sum, mut abs) = (0.0, 0.0);
    for _ in 0..n {
        let z = sample_laplace(0.0, 1.0, rng.gen_range(-0.5..0.5));
        sum += z;
        abs += z.abs();
    }
    assert!((sum / n as f64).abs() < 0.01);
    assert!((abs / n as f64 - 1.0).abs() < 0.01);
}

#[test]
fn kl_examples() {
    assert_eq!(kl_laplace_std(&[0.0], &[1.0]).unwrap(), 0.0);
    assert!((kl_laplace_std(&[1.0], &[1.0]).unwrap() - (-1f64).exp()).abs() < 1e-12);
    assert!((kl_laplace_std(&[0.0], &[2.0]).unwrap() - (1.0 - 2f64.ln())).abs() < 1e-12);
    assert!(kl_laplace_std(&[0.0], &[0.0]).is_err());
    assert!(kl_laplace_std(&[0.0], &[-1.0]).is_err());
    let two = kl_laplace_std(&[1.0, 0.0], &[1.0, 2.0]).unwrap();
    assert!((two - (-1f64).exp() - (1.0 - 2f64.ln())).abs() < 1e-12);
}

#[test]
fn kl_matches_integration_on_grid() {
    for i in 0..=12 {
        let mu = -3.0 + 0.5 * i as f64;
        for b in [0.1, 0.25, 0.5, 1.0, 2.0, 3.5, 5.0] {
            let closed = kl_laplace_std(&[mu], &[b]).unwrap();
            let num = kl_numeric(mu, b);
            assert!((closed - num).abs() < 1e-6, "mu {mu} b {b}: {closed} vs {num}");
            assert!(closed >= 0.0);
            if (mu, b) != (0.0, 1.0) {
                assert!(closed > 0.0);
            }
        }
    }
}

#[test]
fn decode_is_deterministic_and_code_dependent() {
    let m = tiny_model(6);
    let z = random_mat(4, 3, 7);
    let a = m.decode(&z, "a").unwrap();
    assert_eq!(a, m.decode(&z, "a").unwrap());
    let b = m.decode(&z, "b").unwrap();
    let diff = l1_distance(&a, &b);
    assert!(diff > 0.0);
    assert!(m.decode(&z, "zz").is_err());
    assert!(m.decode(&Mat::zeros(1, 2), "a").is_err());
}

#[test]
fn cycle_structure() {
    let mut m = tiny_model(8);
    perturb_head(&mut m, 9);
    let x = random_mat(7, 4, 10);
    let batch = Batch::single(x.clone(), 0, 1);
    let outs = m.cycle_forward(&batch, None).unwrap();
    assert_eq!(outs.cycles.len(), 2);
    assert_eq!(outs.final_cyclic_reconstruction(), &outs.cycles[1].cyc_recon);
    // Cycle 2 starts from the first conversion.
    let q2 = m.encode(&outs.cycles[0].conv).unwrap();
    assert_eq!(q2.mu, outs.cycles[1].posterior.mu);

    let same = m.cycle_forward(&Batch::single(x.clone(), 2, 2), None).unwrap();
    for c in &same.cycles {
        assert_eq!(c.conv, c.recon);
    }

    let mut one = m.clone();
    one.cfg.n_cycles = 1;
    let o1 = one.cycle_forward(&batch, None).unwrap();
    assert_eq!(o1.cycles.len(), 1);
    assert_eq!(o1.cycles[0], outs.cycles[0]);
}

#[test]
fn loss_vanishes_at_perfect_fit() {
    let x = random_mat(3, 4, 11);
    let zero = Posterior { mu: Mat::zeros(3, 2), log_b: Mat::zeros(3, 2) };
    let step = CycleStep {
        recon: x.clone(),
        conv: x.clone(),
        posterior: zero.clone(),
        cyc_posterior: zero,
        cyc_recon: x.clone(),
    };
    let outs = CycleOutputs { cycles: vec![step.clone(), step] };
    assert_eq!(cycle_loss(&outs, &x, 0.1).unwrap(), 0.0);
}

#[test]
fn zero_kl_weight_leaves_l1_terms() {
    let mut m = tiny_model(12);
    perturb_head(&mut m, 13);
    let x = random_mat(5, 4, 14);
    let outs = m.cycle_forward(&Batch::single(x.clone(), 0, 1), None).unwrap();
    let l1: f64 = outs.cycles.iter().map(|c| l1_distance(&c.recon, &x) + l1_distance(&c.cyc_recon, &x)).sum();
    assert_eq!(cycle_loss(&outs, &x, 0.0).unwrap(), l1);
    assert!(cycle_loss(&outs, &x, 0.1).unwrap() > l1);
}

#[test]
fn full_cycle_loss_grad_check() {
    let mut m = tiny_model(15);
    perturb_head(&mut m, 16);
    let x = random_mat(8, 4, 17);
    let batch = Batch {
        x: x.clone(),
        bounds: vec![(0, 5), (5, 3)],
        src: vec![0, 0, 0, 0, 0, 1, 1, 1],
        tgt: vec![1, 1, 1, 1, 1, 2, 2, 2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let noise = draw_noise(&mut rng, 2, 8, 3);
    let err = grad_check(&mut m, |m| m.loss_and_backward(&batch, Some(&noise)).unwrap(), 1e-5, 300, 19);
    assert!(err < 1e-4, "{err}");
}

fn two_speaker_corpus(utts: usize, frames: usize) -> Vec<TrainUtterance> {
    let cfg = crate::toy::ToyCorpusConfig {
        utterances: utts,
        frames_per_utterance: frames,
        analysis: crate::analysis::AnalysisConfig { mcep_dim: 12, ..Default::default() },
        ..Default::default()
    };
    crate::toy::toy_features(&cfg)
        .unwrap()
        .into_iter()
        .flat_map(|(id, fs)| fs.into_iter().map(move |f| TrainUtterance { speaker: id.clone(), mcep: f.mcep }))
        .collect()
}

fn small_train_cfg() -> CycleVaeConfig {
    CycleVaeConfig {
        latent_dim: 8,
        context_window: 2,
        encoder_hidden: vec![32],
        decoder_hidden: vec![32],
        mcep_dim: 12,
        segment_frames: 25,
        batch_segments: 2,
        learning_rate: 3e-3,
        ..Default::default()
    }
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let corpus = two_speaker_corpus(4, 150);
    let cfg = small_train_cfg();
    let (model, report) = train(&corpus, &cfg, 20, 42).unwrap();
    for w in report.train_losses.windows(2).take(5) {
        assert!(w[1] < w[0], "{:?}", report.train_losses);
    }
    assert!(report.final_dev_l1 <= 0.5 * report.initial_dev_l1, "{report:?}");
    let (again, report2) = train(&corpus, &cfg, 20, 42).unwrap();
    assert_eq!(report, report2);
    assert_eq!(model, again);

    let src = &corpus[0].mcep;
    let conv = model.convert_mcep(src, "spkB").unwrap();
    assert_eq!(conv.len(), src.len());
    assert!(model.convert_mcep(src, "nobody").is_err());

    let ck = model.to_checkpoint();
    let back = CycleVae::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.speakers, model.speakers);
    assert_eq!(back.norm, model.norm);
    let c2 = back.convert_mcep(src, "spkB").unwrap();
    let diff = c2.iter().flatten().zip(conv.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-3, "{diff}");
}

#[test]
fn single_speaker_and_empty_corpora() {
    let corpus: Vec<TrainUtterance> = two_speaker_corpus(2, 60).into_iter().filter(|u| u.speaker == "spkA").collect();
    let (model, report) = train(&corpus, &small_train_cfg(), 2, 1).unwrap();
    assert_eq!(model.speakers.len(), 1);
    assert!(report.train_losses.iter().all(|l| l.is_finite()));
    assert!(matches!(train(&[], &small_train_cfg(), 1, 1), Err(CycleVaeError::EmptyCorpus)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn convert_preserves_frame_count(frames in 0usize..40, seed in any::<u64>()) {
        let m = tiny_model(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..frames).map(|_| (0..4).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        prop_assert_eq!(m.convert_mcep(&x, "b").unwrap().len(), frames);
    }
}
