//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails or runs past its time budget.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vcc_core::analysis::{analyze, estimate_f0, AnalysisConfig};
use vcc_core::cyclevae::{
    self, draw_noise, kl_laplace_std, Batch, CycleVae, CycleVaeConfig, NormStats, SpeakerInventory, TrainUtterance,
};
use vcc_core::f0conv::SpeakerF0Stats;
use vcc_core::nn::{grad_check, softmax_cross_entropy, CausalConv, Dense, GruCell, Mat, Parameterized};
use vcc_core::pairing::enumerate_pairs;
use vcc_core::signal::{MuLaw, Waveform};
use vcc_core::toy::{semiparallel_manifests, sustained_vowel, toy_features, toy_waveforms, ToyCorpusConfig};
use vcc_core::vocoder::{
    conditioning_matrix, early_stop_update, prepare, run_stage_plan, train_vocoder, CorpusUtterance, EarlyStopState,
    FeatureMode, StageContext, StageDecision, StagePlan, TrainOptions, Vocoder, VocoderConfig, VocoderUtterance,
};
use vcc_core::wsola::{build_augmentation_plan, f0_transform, TsmConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn codec() -> Outcome {
    let mu = MuLaw::new(256).map_err(|e| e.to_string())?;
    for c in 0..256 {
        check(mu.encode(mu.decode(c)) == c, || format!("code {c} does not roundtrip"))?;
    }
    let mut worst: f64 = 0.0;
    for i in 0..=20000 {
        let x = -1.0 + 2.0 * i as f64 / 20000.0;
        let c = mu.encode(x);
        let (lo, hi) = mu.bin_edges(c);
        let y = mu.decode(c);
        check(lo - 1e-12 <= x && x <= hi + 1e-12, || format!("{x} outside bin {c}"))?;
        let err = (y - x).abs();
        check(err <= hi - lo, || format!("{x}: error {err} exceeds bin width {}", hi - lo))?;
        worst = worst.max(err / (hi - lo));
    }
    Ok(format!("256/256 codes exact, worst error {worst:.3} bin widths"))
}

fn tone(freq: f64, secs: f64) -> Waveform {
    let rate = 16000;
    let n = (secs * rate as f64) as usize;
    let s = (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect();
    Waveform::new(s, rate).unwrap()
}

fn median_f0(w: &Waveform) -> Result<f64, String> {
    let cfg = AnalysisConfig { f0_floor: 40.0, f0_ceil: 600.0, ..Default::default() };
    let (uv, f0) = estimate_f0(w, &cfg).map_err(|e| e.to_string())?;
    let mut v: Vec<f64> = uv.iter().zip(&f0).filter(|(u, _)| **u).map(|(_, f)| *f).collect();
    check(!v.is_empty(), || "no voiced frames".into())?;
    v.sort_by(f64::total_cmp);
    Ok(v[v.len() / 2])
}

fn wsola() -> Outcome {
    let cfg = TsmConfig::default();
    let (mut worst_len, mut worst_f0): (f64, f64) = (0.0, 0.0);
    for f in [110.0, 220.0] {
        let w = tone(f, 1.0);
        for r in [0.5, 0.75, 1.5, 2.0] {
            let y = f0_transform(&w, r, &cfg).map_err(|e| e.to_string())?;
            let dl = (y.len() as f64 / w.len() as f64 - 1.0).abs();
            let got = median_f0(&y)?;
            let df = (got / (r * f) - 1.0).abs();
            check(dl <= 0.02, || format!("{f} Hz x{r}: duration off by {:.2}%", 100.0 * dl))?;
            check(df <= 0.03, || format!("{f} Hz x{r}: F0 {got:.1} vs {:.1}", r * f))?;
            worst_len = worst_len.max(dl);
            worst_f0 = worst_f0.max(df);
        }
    }
    Ok(format!("worst duration error {:.2}%, worst F0 error {:.2}%", 100.0 * worst_len, 100.0 * worst_f0))
}

/// KL(L(mu, b) || L(0, 1)) by composite Simpson integration between kinks.
fn kl_numeric(mu: f64, b: f64) -> f64 {
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
    knots.windows(2).map(|w| simpson(w[0], w[1])).sum()
}

fn kl() -> Outcome {
    let kl1 = |mu: f64, b: f64| kl_laplace_std(&[mu], &[b]).map_err(|e| e.to_string());
    let analytic = [(0.0, 1.0, 0.0), (1.0, 1.0, (-1f64).exp()), (0.0, 2.0, 1.0 - 2f64.ln())];
    let mut worst: f64 = 0.0;
    for (mu, b, want) in analytic {
        let got = kl1(mu, b)?;
        check((got - want).abs() < 1e-12, || format!("KL({mu}, {b}) = {got}, expected {want}"))?;
    }
    for i in 0..=12 {
        let mu = -3.0 + 0.5 * i as f64;
        for b in [0.1, 0.25, 0.5, 1.0, 2.0, 3.5, 5.0] {
            let d = (kl1(mu, b)? - kl_numeric(mu, b)).abs();
            check(d < 1e-6, || format!("mu {mu} b {b}: |delta| {d:e}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("91 grid points, max |delta| {worst:.2e}"))
}

/// Squared error against a fixed target; returns the loss and its gradient.
fn sq_loss(y: &Mat, target: &Mat) -> (f64, Mat) {
    let mut g = y.clone();
    let mut l = 0.0;
    for (gi, t) in g.data.iter_mut().zip(&target.data) {
        let d = *gi - t;
        l += d * d;
        *gi = 2.0 * d;
    }
    (l, g)
}

fn gradients() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();

    let mut dense = Dense::new("d", 4, 6, &mut r);
    let x = random_mat(5, 4, 2);
    let targets = [0, 5, 2, 2, 1];
    out.push((
        "dense",
        grad_check(
            &mut dense,
            |m| {
                let y = m.forward(&x).unwrap();
                let (l, g) = softmax_cross_entropy(&y, &targets).unwrap();
                m.backward(&x, &g);
                l
            },
            1e-5,
            100,
            3,
        ),
    ));

    let mut gru = GruCell::new("g", 3, 5, &mut r);
    let x = random_mat(7, 3, 4);
    let target = random_mat(7, 5, 5);
    out.push((
        "gru",
        grad_check(
            &mut gru,
            |m| {
                let (y, cache) = m.forward(&x).unwrap();
                let (l, g) = sq_loss(&y, &target);
                m.backward(&cache, &g);
                l
            },
            1e-5,
            200,
            6,
        ),
    ));

    let mut conv = CausalConv::new("c", 3, 4, 2, 4, &mut r);
    conv.b.values.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    let x = random_mat(20, 3, 7);
    let target = random_mat(20, 4, 8);
    out.push((
        "causal conv",
        grad_check(
            &mut conv,
            |m| {
                let y = m.forward(&x).unwrap();
                let (l, g) = sq_loss(&y, &target);
                m.backward(&x, &g);
                l
            },
            1e-5,
            200,
            9,
        ),
    ));

    let cfg = CycleVaeConfig {
        latent_dim: 3,
        context_window: 1,
        encoder_hidden: vec![6],
        decoder_hidden: vec![5],
        n_cycles: 2,
        kl_weight: 0.1,
        mcep_dim: 4,
        ..Default::default()
    };
    let mut model = CycleVae::new(cfg, SpeakerInventory::new(["a", "b", "c"]), NormStats::identity(4), 10)
        .map_err(|e| e.to_string())?;
    for p in model.params_mut() {
        if p.name.starts_with("enc.1") {
            p.values.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
    let batch = Batch {
        x: random_mat(8, 4, 11),
        bounds: vec![(0, 5), (5, 3)],
        src: vec![0, 0, 0, 0, 0, 1, 1, 1],
        tgt: vec![1, 1, 1, 1, 1, 2, 2, 2],
    };
    let noise = draw_noise(&mut r, 2, 8, 3);
    out.push((
        "two-cycle CycleVAE",
        grad_check(&mut model, |m| m.loss_and_backward(&batch, Some(&noise)).unwrap(), 1e-5, 300, 12),
    ));

    for (name, err) in &out {
        check(*err < 1e-4, || format!("{name}: relative error {err:e}"))?;
    }
    Ok(out.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "))
}

fn pairing() -> Outcome {
    let (s, t) = semiparallel_manifests(20, 50, 50, 0);
    let base = enumerate_pairs(&s, &t).1.total();
    check(base == 120, || format!("{base} pairs, expected 120"))?;
    let (s, t) = semiparallel_manifests(20, 50, 50, 1132);
    let ext = enumerate_pairs(&s, &t).1.total();
    check(ext == 1252, || format!("{ext} pairs with external set, expected 1252"))?;

    let targets: Vec<String> = (1..=10).map(|i| format!("T{i}")).collect();
    let sources: Vec<String> = (1..=4).map(|i| format!("S{i}")).collect();
    let stats: HashMap<String, SpeakerF0Stats> = targets
        .iter()
        .chain(&sources)
        .enumerate()
        .map(|(i, id)| (id.clone(), SpeakerF0Stats::new(id.clone(), 4.6 + 0.05 * i as f64, 0.2, 1000)))
        .collect();
    let plan = build_augmentation_plan(&targets, &sources, &stats).map_err(|e| e.to_string())?;
    let mut derived: Vec<&str> = plan.entries.iter().map(|e| e.derived_speaker_id.as_str()).collect();
    derived.sort();
    derived.dedup();
    check(derived.len() == 40, || format!("{} derived speakers, expected 40", derived.len()))?;
    Ok(format!("{base} pairs, {ext} with external set, {} derived speakers", derived.len()))
}

/// Mean mel-cepstral distance in dB over frames, excluding coefficient 0.
fn mcd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let k = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| k * x[1..].iter().zip(&y[1..]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    total / a.len() as f64
}

fn cyclevae_toy() -> Outcome {
    let toy = ToyCorpusConfig {
        utterances: 11,
        frames_per_utterance: 220,
        analysis: AnalysisConfig { mcep_dim: 12, ..Default::default() },
        ..Default::default()
    };
    let feats = toy_features(&toy).map_err(|e| e.to_string())?;
    let (a, b) = (&feats[0], &feats[1]);
    let train_frames = |s: &(String, Vec<_>)| s.1[..10].iter().map(|f: &vcc_core::analysis::FeatureSequence| f.frames()).sum::<usize>();
    check(train_frames(a) >= 2000 && train_frames(b) >= 2000, || "toy corpus below 2000 frames per speaker".into())?;
    let corpus: Vec<TrainUtterance> = feats
        .iter()
        .flat_map(|(id, fs)| fs.iter().map(move |f| TrainUtterance { speaker: id.clone(), mcep: f.mcep.clone() }))
        .collect();
    let cfg = CycleVaeConfig {
        latent_dim: 8,
        context_window: 2,
        encoder_hidden: vec![32],
        decoder_hidden: vec![32],
        mcep_dim: 12,
        segment_frames: 25,
        batch_segments: 2,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let (model, report) = cyclevae::train(&corpus, &cfg, 30, 42).map_err(|e| e.to_string())?;
    let first = &report.train_losses[..5];
    check(first.iter().all(|l| l.is_finite()), || format!("non-finite loss {first:?}"))?;
    check(first.windows(2).all(|w| w[1] < w[0]), || format!("loss not decreasing {first:?}"))?;

    // The last utterance of each speaker is held out of training.
    let (src, tgt) = (&a.1[10].mcep, &b.1[10].mcep);
    let conv = model.convert_mcep(src, &b.0).map_err(|e| e.to_string())?;
    let (before, after) = (mcd(src, tgt), mcd(&conv, tgt));
    check(after < before, || format!("converted MCD {after:.3} dB not below unconverted {before:.3} dB"))?;
    Ok(format!(
        "held-out MCD {before:.3} -> {after:.3} dB (margin {:.3} dB), first losses {:.3} -> {:.3}",
        before - after,
        first[0],
        first[4]
    ))
}

fn vocoder_overfit() -> Outcome {
    let an = AnalysisConfig::default();
    let f0 = 220.0;
    let (_, w) = sustained_vowel(f0, 400, 0, 0.0, &an, 16000).map_err(|e| e.to_string())?;
    let fs = analyze(&w, &an).map_err(|e| e.to_string())?;
    let rows = conditioning_matrix(&fs).to_rows();
    let norm = NormStats::fit(&rows, rows[0].len());
    let cfg = VocoderConfig::tiny();
    check(cfg.dilations == [1, 2, 4, 8, 16, 32, 64] && cfg.residual_channels == 32, || "unexpected tiny config".into())?;
    let mut m = Vocoder::new(cfg, norm, 1).map_err(|e| e.to_string())?;
    let u = VocoderUtterance {
        id: "vowel".into(),
        speaker: "s".into(),
        waveform: w.clone(),
        features: fs.clone(),
        mode: FeatureMode::Natural,
    };
    let p = prepare(&m, &u).map_err(|e| e.to_string())?;
    let opts = TrainOptions { max_epochs: 60, patience: None, seed: 0 };
    train_vocoder(&mut m, std::slice::from_ref(&p), &[], &opts).map_err(|e| e.to_string())?;
    let nll = m.teacher_forced_nll(&p.codes, &p.cond).map_err(|e| e.to_string())?;
    check(nll < 1.0, || format!("teacher-forced NLL {nll:.3} nat/sample"))?;

    let g = m.generate(&p.cond, 16000, 7).map_err(|e| e.to_string())?;
    let gf = analyze(&g, &an).map_err(|e| e.to_string())?;
    let voiced: Vec<usize> = (0..fs.frames().min(gf.frames())).filter(|&i| fs.uv[i]).collect();
    let ok = voiced.iter().filter(|&&i| gf.uv[i] && (gf.lf0[i].exp() / f0 - 1.0).abs() <= 0.1).count();
    let gen_voiced: Vec<usize> = (0..gf.frames()).filter(|&i| gf.uv[i]).collect();
    let gen_ok = gen_voiced.iter().filter(|&&i| (gf.lf0[i].exp() / f0 - 1.0).abs() <= 0.1).count();
    let frac = ok as f64 / voiced.len() as f64;
    check(frac >= 0.7, || format!("only {:.1}% of voiced frames within 10% of {f0} Hz", 100.0 * frac))?;

    // Reordering samples from position 500 on must not move earlier outputs.
    let n = 1000;
    let cond = Mat::from_vec(n, p.cond.cols, p.cond.data[..n * p.cond.cols].to_vec());
    let per_sample = |codes: &[usize]| -> Result<Vec<f64>, String> {
        let logits = m.logits(&m.input_signal(codes), &cond).map_err(|e| e.to_string())?;
        Ok((0..n)
            .map(|t| {
                let row = Mat::from_vec(1, logits.cols, logits.row(t).to_vec());
                softmax_cross_entropy(&row, &codes[t..t + 1]).unwrap().0
            })
            .collect())
    };
    let codes = p.codes[..n].to_vec();
    let mut perturbed = codes.clone();
    perturbed[500..].reverse();
    let (a, b) = (per_sample(&codes)?, per_sample(&perturbed)?);
    check(a[..500] == b[..500], || "earlier per-sample NLL changed under a future permutation".into())?;
    Ok(format!(
        "NLL {nll:.3} nat/sample, F0 within 10% on {ok}/{} reference-voiced and {gen_ok}/{} regenerated-voiced frames, causality holds",
        voiced.len(),
        gen_voiced.len()
    ))
}

fn stage_chain() -> Outcome {
    let toy = ToyCorpusConfig {
        utterances: 3,
        frames_per_utterance: 30,
        analysis: AnalysisConfig { mcep_dim: 12, ..Default::default() },
        ..Default::default()
    };
    let feats = toy_features(&toy).map_err(|e| e.to_string())?;
    let waves = toy_waveforms(&toy).map_err(|e| e.to_string())?;
    let corpus: Vec<CorpusUtterance> = feats
        .into_iter()
        .zip(waves)
        .flat_map(|((spk, fs), (_, ws))| {
            fs.into_iter().zip(ws).enumerate().map(move |(i, (f, w))| CorpusUtterance {
                id: format!("{spk}_{i:03}"),
                speaker: spk.clone(),
                waveform: w,
                features: f,
            })
        })
        .collect();
    let train: Vec<TrainUtterance> =
        corpus.iter().map(|u| TrainUtterance { speaker: u.speaker.clone(), mcep: u.features.mcep.clone() }).collect();
    let ccfg = CycleVaeConfig {
        latent_dim: 8,
        context_window: 2,
        encoder_hidden: vec![32],
        decoder_hidden: vec![32],
        mcep_dim: 12,
        segment_frames: 25,
        batch_segments: 2,
        ..Default::default()
    };
    let cvae = cyclevae::train(&train, &ccfg, 2, 42).map_err(|e| e.to_string())?.0;
    let vcfg = VocoderConfig {
        quantization: 16,
        residual_channels: 4,
        skip_channels: 5,
        dilations: vec![1, 2, 4],
        segment_samples: 600,
        ..VocoderConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = StageContext { corpus: &corpus, cyclevae: Some(&cvae), cfg: &vcfg, out_dir: dir.path(), seed: 3 };
    let plan = StagePlan::four_stage(&["spk*"], &["spkA", "spkB"], &["spkA", "spkB"], 2);
    let report = run_stage_plan(&plan, &ctx).map_err(|e| e.to_string())?;
    check(report.results.len() == 5, || format!("{} checkpoints, expected 5", report.results.len()))?;
    let mut links = 0;
    for r in &report.results {
        if r.stage == 1 {
            continue;
        }
        let prev = report.final_of(r.stage - 1).ok_or("missing previous stage")?;
        check(r.init_hash.as_ref() == Some(&prev.final_hash), || format!("stage {} init hash mismatch", r.stage))?;
        check(r.checkpoint.exists(), || format!("{} missing", r.checkpoint.display()))?;
        links += 1;
    }

    let mut s = EarlyStopState::new(3);
    let rising = [3.0, 3.1, 3.2, 3.3, 3.4];
    let stop = rising.iter().position(|&v| early_stop_update(&mut s, v) == StageDecision::Stop);
    check(stop == Some(3), || format!("early stop at {stop:?}, expected epoch index 3"))?;
    Ok(format!("{} checkpoints, {links} hash links verified, early stop after epoch index 3", report.results.len()))
}

fn convert_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    common::write_toy_corpus(&dir.path().join("corpus"), 3, 60);
    let cfg = common::write_config(dir.path(), &common::small_config(json!([common::natural_stage(1, 1)])));
    for cmd in [&["extract"][..], &["stats"], &["train-cyclevae"], &["train-vocoder"]] {
        let o = common::run(&cfg, cmd);
        check(common::code(&o) == 0, || format!("{cmd:?} failed: {}", String::from_utf8_lossy(&o.stderr)))?;
    }
    let input = dir.path().join("corpus/spkA/u000.wav");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}.wav"));
        let o = common::run(
            &cfg,
            &["convert", "--src", "spkA", "--tgt", "spkB", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()],
        );
        check(common::code(&o) == 0, || format!("convert failed: {}", String::from_utf8_lossy(&o.stderr)))?;
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    check(outputs[0] == outputs[1], || "outputs differ".into())?;
    Ok(format!("two runs, {} identical bytes", outputs[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("codec", codec, Duration::from_secs(1)),
        ("wsola f0 transform", wsola, Duration::from_secs(30)),
        ("laplace kl", kl, Duration::from_secs(10)),
        ("gradients", gradients, Duration::from_secs(120)),
        ("pairing arithmetic", pairing, Duration::from_secs(1)),
        ("cyclevae toy conversion", cyclevae_toy, Duration::from_secs(15 * 60)),
        ("vocoder overfit", vocoder_overfit, Duration::from_secs(30 * 60)),
        ("stage chain", stage_chain, Duration::from_secs(20 * 60)),
        ("convert determinism", convert_determinism, Duration::from_secs(20 * 60)),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let took = t0.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > *budget => Err(format!("{detail}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {} {name}: pass ({detail}; {:.2} s)", i + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why}; {:.2} s)", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
