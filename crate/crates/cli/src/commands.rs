use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use vcc_core::analysis::analyze;
use vcc_core::cyclevae::{self, CycleVae, TrainUtterance};
use vcc_core::f0conv::{assemble_converted_features, collect_stats, convert_lf0_sequence, SpeakerF0Stats};
use vcc_core::pairing::{
    enumerate_pairs, external_requests, pseudo_parallel_requests, write_pairs_jsonl, write_requests_jsonl, Manifest,
};
use vcc_core::signal::{read_wav, write_wav};
use vcc_core::vocoder::{
    checkpoint_name, run_stage, run_stage_plan, CorpusUtterance, FeatureMode, StageContext, StageResult, Vocoder,
};
use vcc_core::wsola::{build_augmentation_plan, f0_transform, AugmentationPlan};

use crate::config::PipelineConfig;
use crate::corpus::{by_speaker, discover, FeatureCache, WavEntry};
use crate::error::{Context, PipelineError};
use crate::workspace::{read_json, sha256_hex, write_atomic, write_json};

/// Outcome of one command.
#[derive(Debug, Default, Serialize)]
pub struct Report {
    pub artifacts: Vec<PathBuf>,
    /// Per-item problems that did not abort the run.
    pub failures: Vec<String>,
    pub summary: serde_json::Value,
}

fn all_roots(cfg: &PipelineConfig) -> Vec<PathBuf> {
    let mut roots = cfg.corpus_roots.clone();
    let aug = cfg.augmented_dir();
    if aug.is_dir() {
        roots.push(aug);
    }
    roots
}

fn stats_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("f0_stats.json")
}

fn cyclevae_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.models_dir().join("cyclevae.vckp")
}

fn stage_result_path(cfg: &PipelineConfig, stage: u8) -> PathBuf {
    cfg.models_dir().join(format!("vocoder_stage{stage}.json"))
}

/// Analyzes every recording whose cache entry is missing or stale.
pub fn extract(cfg: &PipelineConfig, filter: Option<&str>) -> Result<Report, PipelineError> {
    let pattern = filter
        .map(|f| glob::Pattern::new(f).map_err(|e| PipelineError::Config(format!("bad corpus glob {f:?}: {e}"))))
        .transpose()?;
    let entries = discover(&all_roots(cfg), pattern.as_ref())?;
    let cache = FeatureCache::new(&cfg.cache_dir, &cfg.analysis);
    let results: Vec<Result<(PathBuf, bool), String>> = entries
        .par_iter()
        .map(|e| {
            let bytes = std::fs::read(&e.path).map_err(|err| format!("{}: {err}", e.path.display()))?;
            let hash = sha256_hex(&bytes);
            if cache.is_fresh(e, &hash) {
                return Ok((cache.features_path(e), false));
            }
            let w = read_wav(&e.path).map_err(|err| format!("{}: {err}", e.path.display()))?;
            let fs = analyze(&w, &cfg.analysis).map_err(|err| format!("{}: {err}", e.path.display()))?;
            let p = cache.store(e, &hash, &fs).map_err(|err| err.to_string())?;
            Ok((p, true))
        })
        .collect();
    let mut report = Report::default();
    let mut computed = 0;
    for r in results {
        match r {
            Ok((p, fresh)) => {
                computed += fresh as usize;
                report.artifacts.push(p);
            }
            Err(msg) => {
                log::error!("extract: {msg}");
                report.failures.push(msg);
            }
        }
    }
    report.summary = json!({
        "utterances": entries.len(),
        "computed": computed,
        "skipped": report.artifacts.len() - computed,
        "failed": report.failures.len(),
    });
    Ok(report)
}

fn load_features(
    cfg: &PipelineConfig,
    entries: &[WavEntry],
) -> Result<Vec<vcc_core::analysis::FeatureSequence>, PipelineError> {
    let cache = FeatureCache::new(&cfg.cache_dir, &cfg.analysis);
    entries.par_iter().map(|e| cache.load(e)).collect()
}

/// Per-speaker lf0 statistics over the cached features.
pub fn stats(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    let entries = discover(&all_roots(cfg), None)?;
    let feats = load_features(cfg, &entries)?;
    let mut grouped: BTreeMap<&str, Vec<&vcc_core::analysis::FeatureSequence>> = BTreeMap::new();
    for (e, f) in entries.iter().zip(&feats) {
        grouped.entry(e.speaker.as_str()).or_default().push(f);
    }
    let mut report = Report::default();
    let mut out: BTreeMap<String, SpeakerF0Stats> = BTreeMap::new();
    for (spk, fs) in grouped {
        match collect_stats(spk, fs) {
            Ok(s) => {
                out.insert(spk.to_string(), s);
            }
            Err(e) => report.failures.push(format!("{spk}: {e}")),
        }
    }
    let path = stats_path(cfg);
    write_json(&path, &out)?;
    report.summary = serde_json::to_value(&out).unwrap_or_default();
    report.artifacts.push(path);
    Ok(report)
}

fn load_stats(cfg: &PipelineConfig) -> Result<BTreeMap<String, SpeakerF0Stats>, PipelineError> {
    let p = stats_path(cfg);
    if !p.exists() {
        return Err(PipelineError::Failed(format!("missing {}; run `vcc stats` first", p.display())));
    }
    read_json(&p)
}

/// Writes the augmentation plan and one pitch-shifted copy of every target
/// utterance per plan entry.
pub fn augment(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    let aug = cfg
        .augmentation
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no `augmentation` section in the config".into()))?;
    let mut report = Report::default();
    if aug.targets.is_empty() || aug.sources.is_empty() {
        report.summary = json!({ "entries": 0, "files": 0 });
        return Ok(report);
    }
    let stats: HashMap<String, SpeakerF0Stats> = load_stats(cfg)?.into_iter().collect();
    let plan = build_augmentation_plan(&aug.targets, &aug.sources, &stats).context(|| "augmentation plan".into())?;
    let plan_path = cfg.work_dir.join("augment_plan.jsonl");
    let mut buf = Vec::new();
    plan.write_jsonl(&mut buf).context(|| "serializing plan".into())?;
    write_atomic(&plan_path, &buf)?;
    report.artifacts.push(plan_path);

    let natural = discover(&cfg.corpus_roots, None)?;
    let speakers = by_speaker(&natural);
    let jobs: Vec<(&vcc_core::wsola::AugmentationEntry, &WavEntry)> = plan
        .entries
        .iter()
        .flat_map(|en| speakers.get(&en.target_speaker_id).into_iter().flatten().map(move |w| (en, *w)))
        .collect();
    let out_dir = cfg.augmented_dir();
    let results: Vec<Result<PathBuf, String>> = jobs
        .par_iter()
        .map(|(en, w)| {
            let src = read_wav(&w.path).map_err(|e| format!("{}: {e}", w.path.display()))?;
            let y = f0_transform(&src, en.f0_ratio, &aug.tsm).map_err(|e| format!("{}: {e}", w.path.display()))?;
            let path = out_dir.join(&en.derived_speaker_id).join(format!("{}.wav", w.id));
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
            write_wav(&path, &y).map_err(|e| format!("{}: {e}", path.display()))?;
            Ok(path)
        })
        .collect();
    for r in results {
        match r {
            Ok(p) => report.artifacts.push(p),
            Err(e) => report.failures.push(e),
        }
    }
    let mut inventory: Vec<String> = speakers.keys().cloned().collect();
    inventory.extend(plan.entries.iter().map(|e| e.derived_speaker_id.clone()));
    inventory.sort();
    inventory.dedup();
    let inv_path = cfg.work_dir.join("speakers.json");
    write_json(&inv_path, &inventory)?;
    report.artifacts.push(inv_path);
    report.summary = json!({
        "entries": plan.entries.len(),
        "derived_speakers": plan.entries.iter().map(|e| &e.derived_speaker_id).collect::<Vec<_>>(),
        "files": jobs.len() - report.failures.len(),
    });
    Ok(report)
}

/// Reads back a plan written by [`augment`].
pub fn load_augmentation_plan(cfg: &PipelineConfig) -> Result<AugmentationPlan, PipelineError> {
    let p = cfg.work_dir.join("augment_plan.jsonl");
    let f = std::fs::File::open(&p).context(|| format!("opening {}", p.display()))?;
    AugmentationPlan::read_jsonl(std::io::BufReader::new(f)).context(|| format!("parsing {}", p.display()))
}

fn single(m: &Manifest, side: &str) -> Result<String, PipelineError> {
    let s = m.speakers();
    if s.len() != 1 {
        return Err(PipelineError::Failed(format!("{side} manifest must hold exactly one speaker, found {}", s.len())));
    }
    Ok(s.into_iter().next().unwrap_or_default().to_string())
}

/// TTS requests, optional synthesis, and the parallel-pair list.
pub fn pairs(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    let pc = cfg
        .pairing
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no `pairing` section in the config".into()))?;
    let mut src = Manifest::load(&pc.source_manifest).context(|| format!("{}", pc.source_manifest.display()))?;
    let mut tgt = Manifest::load(&pc.target_manifest).context(|| format!("{}", pc.target_manifest.display()))?;
    let mut report = Report::default();

    let mut requests = pseudo_parallel_requests(&src, &tgt).context(|| "pseudo-parallel requests".into())?;
    if let Some(p) = &pc.external_texts {
        let text = std::fs::read_to_string(p).context(|| format!("reading {}", p.display()))?;
        let texts: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        let speakers = vec![single(&src, "source")?, single(&tgt, "target")?];
        requests.extend(external_requests(&texts, &speakers).context(|| "external requests".into())?);
    }
    let req_path = cfg.work_dir.join("tts_requests.jsonl");
    let mut buf = Vec::new();
    write_requests_jsonl(&requests, &mut buf).context(|| "serializing requests".into())?;
    write_atomic(&req_path, &buf)?;
    report.artifacts.push(req_path);

    let mut synthesized = 0;
    if let Some(tts) = &pc.tts {
        let transcripts: BTreeMap<String, String> = match &pc.transcripts {
            Some(p) => read_json(p)?,
            None => BTreeMap::new(),
        };
        let outcome = tts.run(&requests, &transcripts, &cfg.work_dir.join("tts")).context(|| "tts".into())?;
        for f in &outcome.failed {
            report.failures.push(format!(
                "tts {} for {}: {}",
                f.request.content_id, f.request.producing_speaker, f.reason
            ));
        }
        synthesized = outcome.produced.len();
        let (s_spk, t_spk) = (single(&src, "source")?, single(&tgt, "target")?);
        let merge = |m: &Manifest, spk: &str| {
            let mut recs = m.records().to_vec();
            recs.extend(outcome.produced.iter().filter(|r| r.speaker_id == spk).cloned());
            Manifest::new(recs)
        };
        src = merge(&src, &s_spk).context(|| "merging source manifest".into())?;
        tgt = merge(&tgt, &t_spk).context(|| "merging target manifest".into())?;
        for (m, name) in [(&src, "source"), (&tgt, "target")] {
            let p = cfg.work_dir.join("manifests").join(format!("{name}.jsonl"));
            std::fs::create_dir_all(p.parent().unwrap()).context(|| "creating manifests dir".into())?;
            m.save(&p).context(|| format!("writing {}", p.display()))?;
            report.artifacts.push(p);
        }
    }

    let (pairs, counts) = enumerate_pairs(&src, &tgt);
    let pairs_path = cfg.work_dir.join("pairs.jsonl");
    let mut buf = Vec::new();
    write_pairs_jsonl(&pairs, &mut buf).context(|| "serializing pairs".into())?;
    write_atomic(&pairs_path, &buf)?;
    report.artifacts.push(pairs_path);
    report.summary = json!({
        "requests": requests.len(),
        "synthesized": synthesized,
        "type1": counts.type1,
        "type2": counts.type2,
        "type3": counts.type3,
        "type4": counts.type4,
        "total": counts.total(),
    });
    Ok(report)
}

/// Trains the spectral model on every cached speaker, natural and derived.
pub fn train_cyclevae(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    let entries = discover(&all_roots(cfg), None)?;
    let feats = load_features(cfg, &entries)?;
    let corpus: Vec<TrainUtterance> = entries
        .iter()
        .zip(feats)
        .map(|(e, f)| TrainUtterance { speaker: e.speaker.clone(), mcep: f.mcep })
        .collect();
    let (model, tr) =
        cyclevae::train(&corpus, &cfg.cyclevae, cfg.cyclevae_epochs, cfg.seed).context(|| "cyclevae training".into())?;
    let path = cyclevae_path(cfg);
    std::fs::create_dir_all(cfg.models_dir()).context(|| "creating models dir".into())?;
    model.save(&path).context(|| format!("writing {}", path.display()))?;
    let rpath = cfg.models_dir().join("cyclevae_report.json");
    write_json(&rpath, &tr)?;
    report_with(vec![path, rpath], json!({
        "speakers": model.speakers.ids,
        "best_epoch": tr.best_epoch,
        "initial_dev_l1": tr.initial_dev_l1,
        "final_dev_l1": tr.final_dev_l1,
    }))
}

fn report_with(artifacts: Vec<PathBuf>, summary: serde_json::Value) -> Result<Report, PipelineError> {
    Ok(Report { artifacts, failures: Vec::new(), summary })
}

fn load_cyclevae(cfg: &PipelineConfig) -> Result<CycleVae, PipelineError> {
    let p = cyclevae_path(cfg);
    if !p.exists() {
        return Err(PipelineError::Failed(format!(
            "missing CycleVAE checkpoint {}; run `vcc train-cyclevae` first",
            p.display()
        )));
    }
    CycleVae::load(&p).context(|| format!("loading {}", p.display()))
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<CorpusUtterance>, PipelineError> {
    let entries = discover(&all_roots(cfg), None)?;
    let feats = load_features(cfg, &entries)?;
    entries
        .par_iter()
        .zip(feats)
        .map(|(e, features)| {
            Ok(CorpusUtterance {
                id: e.id.clone(),
                speaker: e.speaker.clone(),
                waveform: read_wav(&e.path).context(|| format!("{}", e.path.display()))?,
                features,
            })
        })
        .collect()
}

/// Runs the vocoder stage plan, or a single stage chained from the stored
/// result of the stage before it.
pub fn train_vocoder(cfg: &PipelineConfig, stage: Option<u8>) -> Result<Report, PipelineError> {
    let plan = cfg
        .stage_plan
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no `stage_plan` section in the config".into()))?;
    if let Some(k) = stage {
        if !plan.stages.iter().any(|s| s.stage == k) {
            return Err(PipelineError::Config(format!("stage plan has no stage {k}")));
        }
    }
    let prior = match stage {
        Some(k) if k > 1 => {
            let p = stage_result_path(cfg, k - 1);
            if !p.exists() {
                return Err(PipelineError::Failed(format!(
                    "missing vocoder stage {} result {}; train stage {} first",
                    k - 1,
                    p.display(),
                    k - 1
                )));
            }
            let prev: Vec<StageResult> = read_json(&p)?;
            Some(prev.into_iter().find(|r| r.target.is_none()).ok_or_else(|| {
                PipelineError::Failed(format!("stage {} left no shared checkpoint", k - 1))
            })?)
        }
        _ => None,
    };
    let needs_cvae = plan
        .stages
        .iter()
        .filter(|s| stage.is_none_or(|k| k == s.stage))
        .any(|s| s.feature_mode != FeatureMode::Natural);
    let cvae = if needs_cvae { Some(load_cyclevae(cfg)?) } else { None };
    let corpus = load_corpus(cfg)?;
    let models = cfg.models_dir();
    let ctx = StageContext {
        corpus: &corpus,
        cyclevae: cvae.as_ref(),
        cfg: &cfg.vocoder,
        out_dir: &models,
        seed: cfg.seed,
    };
    let results: Vec<StageResult> = match stage {
        None => run_stage_plan(plan, &ctx).context(|| "vocoder stage plan".into())?.results,
        Some(k) => run_stage(plan, k, &ctx, prior.as_ref()).context(|| format!("vocoder stage {k}"))?,
    };
    let mut artifacts = Vec::new();
    let mut stages: Vec<u8> = results.iter().map(|r| r.stage).collect();
    stages.dedup();
    for k in stages {
        let of_k: Vec<&StageResult> = results.iter().filter(|r| r.stage == k).collect();
        let p = stage_result_path(cfg, k);
        write_json(&p, &of_k)?;
        artifacts.push(p);
        artifacts.extend(of_k.iter().map(|r| r.checkpoint.clone()));
    }
    let summary = results
        .iter()
        .map(|r| {
            json!({
                "stage": r.stage,
                "target": r.target,
                "speakers": r.speakers.len(),
                "init_hash": r.init_hash,
                "final_hash": r.final_hash,
                "epochs": r.report.train_nll.len(),
                "best_epoch": r.report.best_epoch,
            })
        })
        .collect::<Vec<_>>();
    report_with(artifacts, json!(summary))
}

/// The most specific vocoder available for `tgt`: its own stage-4 model,
/// else the latest shared stage.
fn vocoder_for(cfg: &PipelineConfig, tgt: &str) -> Result<PathBuf, PipelineError> {
    let models = cfg.models_dir();
    let own = models.join(checkpoint_name(4, Some(tgt)));
    if own.exists() {
        return Ok(own);
    }
    for k in [3u8, 2, 1] {
        let p = models.join(checkpoint_name(k, None));
        if p.exists() {
            log::warn!("no stage 4 vocoder for {tgt}; using stage {k}");
            return Ok(p);
        }
    }
    Err(PipelineError::Failed(format!(
        "missing vocoder checkpoint: no stage 4 model for {tgt} and no stage 1-3 model in {}",
        models.display()
    )))
}

/// analyze, convert mel-cepstra and lf0, upsample, generate.
pub fn convert(
    cfg: &PipelineConfig,
    src: &str,
    tgt: &str,
    input: &Path,
    output: &Path,
) -> Result<Report, PipelineError> {
    let stats = load_stats(cfg)?;
    let lookup = |s: &str| {
        stats
            .get(s)
            .ok_or_else(|| PipelineError::Failed(format!("no F0 statistics for speaker {s}; rerun `vcc stats`")))
    };
    let (s_stats, t_stats) = (lookup(src)?, lookup(tgt)?);
    let cvae = load_cyclevae(cfg)?;
    let voc_path = vocoder_for(cfg, tgt)?;
    let voc = Vocoder::load(&voc_path).context(|| format!("loading {}", voc_path.display()))?;

    let w = read_wav(input).context(|| format!("{}", input.display()))?;
    let fs = analyze(&w, &cfg.analysis).context(|| format!("analyzing {}", input.display()))?;
    let mcep = cvae.convert_mcep(&fs.mcep, tgt).context(|| "spectral conversion".into())?;
    let lf0 = convert_lf0_sequence(&fs.lf0, s_stats, t_stats).context(|| "F0 conversion".into())?;
    let conv = assemble_converted_features(&fs, mcep, lf0).context(|| "assembling features".into())?;
    let feat_path = output.with_extension("features.json");
    write_json(&feat_path, &conv)?;
    let cond = voc.conditioning(&conv).context(|| "conditioning".into())?;
    let y = voc.generate(&cond, w.rate(), cfg.seed).context(|| "generation".into())?;
    if let Some(d) = output.parent() {
        std::fs::create_dir_all(d).context(|| format!("creating {}", d.display()))?;
    }
    write_wav(output, &y).context(|| format!("writing {}", output.display()))?;
    report_with(
        vec![output.to_path_buf(), feat_path],
        json!({
            "frames": conv.frames(),
            "samples": y.len(),
            "vocoder": voc_path,
        }),
    )
}

/// Fast consistency checks of the numeric core; one line per check.
pub fn selftest() -> Result<Report, PipelineError> {
    use vcc_core::nn::{grad_check, Dense, Mat, Parameterized};
    use vcc_core::pairing::{enumerate_pairs as pairs_of, PairCounts};
    use vcc_core::signal::MuLaw;
    use vcc_core::toy::semiparallel_manifests;
    use vcc_core::wsola::derived_speaker_id;

    let mut checks: Vec<(&str, bool)> = Vec::new();
    let mu = MuLaw::new(256).map_err(|e| PipelineError::Failed(e.to_string()))?;
    checks.push(("mu-law code roundtrip", (0..256).all(|c| mu.encode(mu.decode(c)) == c)));

    let kl0 = cyclevae::kl_laplace_std(&[0.0], &[1.0]).unwrap_or(f64::NAN);
    let kl1 = cyclevae::kl_laplace_std(&[1.0], &[1.0]).unwrap_or(f64::NAN);
    checks.push(("laplace KL closed form", kl0.abs() < 1e-12 && (kl1 - (-1f64).exp()).abs() < 1e-12));

    let (s, t) = semiparallel_manifests(20, 50, 50, 0);
    checks.push(("pair arithmetic", pairs_of(&s, &t).1 == PairCounts { type1: 20, type2: 50, type3: 50, type4: 0 }));

    let targets: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let sources: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    let stats: HashMap<String, SpeakerF0Stats> = targets
        .iter()
        .chain(&sources)
        .enumerate()
        .map(|(i, id)| (id.clone(), SpeakerF0Stats::new(id.clone(), 4.6 + 0.05 * i as f64, 0.2, 500)))
        .collect();
    let plan_ok = build_augmentation_plan(&targets, &sources, &stats)
        .map(|p| {
            p.entries.len() == 40
                && p.entries.iter().all(|e| e.derived_speaker_id == derived_speaker_id(&e.target_speaker_id, &e.source_speaker_id))
        })
        .unwrap_or(false);
    checks.push(("augmentation plan size", plan_ok));

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let mut d = Dense::new("d", 3, 2, &mut rng);
    let x = Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
    let err = grad_check(
        &mut d,
        |m| {
            let y = m.forward(&x).expect("shapes agree");
            let loss: f64 = y.data.iter().map(|v| v * v).sum::<f64>() * 0.5;
            m.backward(&x, &y);
            loss
        },
        1e-6,
        8,
        2,
    );
    checks.push(("dense gradient check", err < 1e-6 && d.param_count() == 8));

    let mut report = Report::default();
    for (name, ok) in &checks {
        println!("selftest {name}: {}", if *ok { "pass" } else { "FAIL" });
        if !ok {
            report.failures.push(name.to_string());
        }
    }
    report.summary = json!({ "checks": checks.len(), "failed": report.failures.len() });
    Ok(report)
}
