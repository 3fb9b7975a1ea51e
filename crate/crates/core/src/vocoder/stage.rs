use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{conditioning_matrix, make_vocoder_features, CorpusUtterance, FeatureMode, VocoderUtterance};
use super::model::{Vocoder, VocoderConfig};
use super::VocoderError;
use crate::cyclevae::{CycleVae, NormStats};
use crate::nn::{clip_grad_norm, params_hash, Adam, Mat, Parameterized};

/// Default patience for stages that stop on the dev set.
pub const DEFAULT_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u8,
    pub feature_mode: FeatureMode,
    /// Speaker id globs (`*`, `?`, `[..]`).
    pub speakers: Vec<String>,
    pub max_epochs: usize,
    /// Dev-set early stopping; `None` trains for `max_epochs`.
    #[serde(default)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    /// The four-step schedule: natural multispeaker, reconstructed
    /// multispeaker, generated subset, generated per target.
    pub fn four_stage(all: &[&str], subset: &[&str], targets: &[&str], epochs: usize) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let spec = |stage, feature_mode, speakers, patience| StageSpec {
            stage,
            feature_mode,
            speakers,
            max_epochs: epochs,
            patience,
        };
        Self {
            stages: vec![
                spec(1, FeatureMode::Natural, own(all), None),
                spec(2, FeatureMode::Reconstructed, own(all), None),
                spec(3, FeatureMode::Generated, own(subset), Some(DEFAULT_PATIENCE)),
                spec(4, FeatureMode::Generated, own(targets), Some(DEFAULT_PATIENCE)),
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self, VocoderError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String, VocoderError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks ordering and the shrinking speaker pattern against the
    /// available speakers; returns the resolved sets.
    pub fn resolve(&self, available: &[String]) -> Result<Vec<Vec<String>>, VocoderError> {
        if self.stages.is_empty() || self.stages.len() > 4 {
            return Err(VocoderError::Plan(format!("expected 1 to 4 stages, got {}", self.stages.len())));
        }
        let mut sets = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage as usize != i + 1 {
                return Err(VocoderError::Plan(format!("stage at position {} is numbered {}", i + 1, s.stage)));
            }
            if s.max_epochs == 0 {
                return Err(VocoderError::Plan(format!("stage {} has zero epochs", s.stage)));
            }
            if s.patience == Some(0) {
                return Err(VocoderError::Plan(format!("stage {} has zero patience", s.stage)));
            }
            if s.stage == 1 && s.feature_mode != FeatureMode::Natural {
                return Err(VocoderError::Plan("stage 1 trains on natural features".into()));
            }
            let set = resolve_speakers(&s.speakers, available)?;
            if s.stage >= 3 {
                let prev: BTreeSet<&String> = sets.last().map(|p: &Vec<String>| p.iter().collect()).unwrap_or_default();
                if let Some(extra) = set.iter().find(|x| !prev.contains(x)) {
                    return Err(VocoderError::Plan(format!(
                        "stage {} speaker {extra} is not in stage {}",
                        s.stage,
                        s.stage - 1
                    )));
                }
            }
            sets.push(set);
        }
        Ok(sets)
    }

    /// File names of the checkpoints a run emits, in order.
    pub fn expected_checkpoints(&self, available: &[String]) -> Result<Vec<String>, VocoderError> {
        let sets = self.resolve(available)?;
        let mut out = Vec::new();
        for (s, set) in self.stages.iter().zip(&sets) {
            if s.stage == 4 {
                out.extend(set.iter().map(|t| checkpoint_name(4, Some(t))));
            } else {
                out.push(checkpoint_name(s.stage, None));
            }
        }
        Ok(out)
    }
}

pub fn checkpoint_name(stage: u8, target: Option<&str>) -> String {
    match target {
        Some(t) => format!("vocoder_stage{stage}_{t}.vckp"),
        None => format!("vocoder_stage{stage}.vckp"),
    }
}

/// Expands speaker globs against `available`; every pattern must match.
pub fn resolve_speakers(patterns: &[String], available: &[String]) -> Result<Vec<String>, VocoderError> {
    let mut out = BTreeSet::new();
    for p in patterns {
        let pat = glob::Pattern::new(p).map_err(|e| VocoderError::Plan(format!("bad speaker glob {p:?}: {e}")))?;
        let mut hit = false;
        for a in available.iter().filter(|a| pat.matches(a)) {
            hit = true;
            out.insert(a.clone());
        }
        if !hit {
            return Err(VocoderError::Plan(format!("speaker pattern {p:?} matches nothing")));
        }
    }
    if out.is_empty() {
        return Err(VocoderError::Plan("empty speaker set".into()));
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_dev_nll: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    /// Index (0-based update count) of the best value seen.
    pub best_index: Option<usize>,
    pub updates: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_dev_nll: f64::INFINITY,
            epochs_since_improvement: 0,
            patience: patience.max(1),
            best_index: None,
            updates: 0,
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(DEFAULT_PATIENCE)
    }
}

/// Records `dev_nll`; stops once `patience` consecutive updates failed to
/// strictly improve on the best value.
pub fn early_stop_update(state: &mut EarlyStopState, dev_nll: f64) -> StageDecision {
    let idx = state.updates;
    state.updates += 1;
    if dev_nll < state.best_dev_nll {
        state.best_dev_nll = dev_nll;
        state.best_index = Some(idx);
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
    }
    if state.epochs_since_improvement >= state.patience {
        StageDecision::Stop
    } else {
        StageDecision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VocoderTrainReport {
    pub train_nll: Vec<f64>,
    pub dev_nll: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Codes and per-sample conditioning of one utterance.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub codes: Vec<usize>,
    pub cond: Mat,
}

/// Encodes the waveform and upsamples the features; lengths are trimmed to
/// the shorter of the two when they differ by at most one hop.
pub fn prepare(model: &Vocoder, u: &VocoderUtterance) -> Result<Prepared, VocoderError> {
    let cond = model.conditioning(&u.features)?;
    let hop = (u.features.frame_shift * u.features.source_rate as f64).round() as usize;
    let n = u.waveform.len().min(cond.rows);
    if u.waveform.len().abs_diff(cond.rows) > hop.max(1) {
        return Err(VocoderError::Alignment(format!(
            "{}: {} samples vs {} conditioning rows",
            u.id,
            u.waveform.len(),
            cond.rows
        )));
    }
    if u.waveform.rate() != u.features.source_rate {
        return Err(VocoderError::Alignment(format!("{}: waveform and feature rates differ", u.id)));
    }
    let codes = model.mulaw().encode_all(&u.waveform.samples()[..n]);
    let cond = Mat::from_vec(n, cond.cols, cond.data[..n * cond.cols].to_vec());
    Ok(Prepared { id: u.id.clone(), codes, cond })
}

fn mean_nll(model: &Vocoder, set: &[Prepared]) -> Result<f64, VocoderError> {
    let (mut tot, mut n) = (0.0, 0usize);
    for p in set {
        tot += model.teacher_forced_nll(&p.codes, &p.cond)? * p.codes.len() as f64;
        n += p.codes.len();
    }
    Ok(if n == 0 { f64::NAN } else { tot / n as f64 })
}

/// Teacher-forced training over fixed-length segments with Adam. With a
/// patience the best dev parameters are restored before returning.
pub fn train_vocoder(
    model: &mut Vocoder,
    train: &[Prepared],
    dev: &[Prepared],
    opts: &TrainOptions,
) -> Result<VocoderTrainReport, VocoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(model.cfg.learning_rate);
    let seg = model.cfg.segment_samples;
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for (i, p) in train.iter().enumerate() {
        let mut s = 0;
        while s < p.codes.len() {
            segments.push((i, s));
            s += seg;
        }
    }
    if segments.is_empty() {
        return Err(VocoderError::Plan("no training samples".into()));
    }
    let mut report = VocoderTrainReport::default();
    let mut stop = opts.patience.map(EarlyStopState::new);
    let mut best: Option<Vocoder> = None;
    for epoch in 0..opts.max_epochs {
        segments.shuffle(&mut rng);
        let (mut tot, mut n) = (0.0, 0usize);
        for &(i, s) in &segments {
            let p = &train[i];
            let len = seg.min(p.codes.len() - s);
            model.zero_grad();
            let loss = model.segment_nll(&p.codes, &p.cond, s, len, true)?;
            let clip = model.cfg.grad_clip;
            clip_grad_norm(model.params_mut(), clip);
            adam.step(model.params_mut())?;
            report.steps += 1;
            tot += loss * len as f64;
            n += len;
        }
        report.train_nll.push(tot / n as f64);
        let dev_nll = if dev.is_empty() { None } else { Some(mean_nll(model, dev)?) };
        if let Some(d) = dev_nll {
            report.dev_nll.push(d);
        }
        log::info!("vocoder epoch {epoch}: train {:.4} dev {:?}", tot / n as f64, dev_nll);
        if let (Some(st), Some(d)) = (stop.as_mut(), dev_nll) {
            let decision = early_stop_update(st, d);
            if st.best_index == Some(epoch) {
                best = Some(model.clone());
            }
            if decision == StageDecision::Stop {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some(st) = &stop {
        report.best_epoch = st.best_index;
    }
    if let Some(b) = best {
        *model = b;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: u8,
    pub target: Option<String>,
    pub speakers: Vec<String>,
    pub checkpoint: PathBuf,
    /// Hash of the parameters as loaded from the previous stage.
    pub init_hash: Option<String>,
    pub final_hash: String,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub report: VocoderTrainReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRunReport {
    pub results: Vec<StageResult>,
}

impl StageRunReport {
    pub fn final_of(&self, stage: u8) -> Option<&StageResult> {
        self.results.iter().find(|r| r.stage == stage && r.target.is_none())
    }
}

/// Dev split per speaker: the last `max(1, n/7)` utterances (10 of 70),
/// none when a speaker has a single utterance.
pub fn split_dev(utts: Vec<VocoderUtterance>) -> (Vec<VocoderUtterance>, Vec<VocoderUtterance>) {
    let mut by_spk: BTreeMap<String, Vec<VocoderUtterance>> = BTreeMap::new();
    for u in utts {
        by_spk.entry(u.speaker.clone()).or_default().push(u);
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (_, mut v) in by_spk {
        v.sort_by(|a, b| a.id.cmp(&b.id));
        let n = v.len();
        let k = if n >= 2 { (n * 10 / 70).max(1) } else { 0 };
        dev.extend(v.drain(n - k..));
        train.extend(v);
    }
    (train, dev)
}

/// Everything a stage run needs besides the plan.
pub struct StageContext<'a> {
    pub corpus: &'a [CorpusUtterance],
    pub cyclevae: Option<&'a CycleVae>,
    pub cfg: &'a VocoderConfig,
    pub out_dir: &'a Path,
    pub seed: u64,
}

/// Runs one stage. Stages after the first load `prior`'s checkpoint and
/// verify its hash before training.
pub fn run_stage(
    plan: &StagePlan,
    stage: u8,
    ctx: &StageContext<'_>,
    prior: Option<&StageResult>,
) -> Result<Vec<StageResult>, VocoderError> {
    let available: Vec<String> =
        ctx.corpus.iter().map(|u| u.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let sets = plan.resolve(&available)?;
    let idx = plan
        .stages
        .iter()
        .position(|s| s.stage == stage)
        .ok_or_else(|| VocoderError::Plan(format!("plan has no stage {stage}")))?;
    let spec = &plan.stages[idx];
    let speakers = &sets[idx];
    std::fs::create_dir_all(ctx.out_dir)?;
    let groups: Vec<(Option<String>, Vec<String>)> = if stage == 4 {
        speakers.iter().map(|t| (Some(t.clone()), vec![t.clone()])).collect()
    } else {
        vec![(None, speakers.clone())]
    };
    let mut results = Vec::new();
    for (target, spks) in groups {
        let subset: Vec<CorpusUtterance> = ctx.corpus.iter().filter(|u| spks.contains(&u.speaker)).cloned().collect();
        let feats = make_vocoder_features(&subset, spec.feature_mode, ctx.cyclevae)?;
        let (train_u, dev_u) = split_dev(feats);
        let (mut model, init_hash) = match (stage, prior) {
            (1, _) => {
                let rows: Vec<Vec<f64>> = train_u.iter().flat_map(|u| conditioning_matrix(&u.features).to_rows()).collect();
                let dim = rows.first().map_or(0, |r| r.len());
                (Vocoder::new(ctx.cfg.clone(), NormStats::fit(&rows, dim), ctx.seed)?, None)
            }
            (_, None) => {
                return Err(VocoderError::Plan(format!("stage {stage} needs the stage {} result", stage - 1)));
            }
            (_, Some(p)) => {
                let m = Vocoder::load(&p.checkpoint)?;
                let h = params_hash(&m.params());
                if h != p.final_hash {
                    return Err(VocoderError::Integrity(format!(
                        "stage {stage} init hash {h} does not match stage {} final hash {}",
                        p.stage, p.final_hash
                    )));
                }
                (m, Some(h))
            }
        };
        let train_p: Vec<Prepared> = train_u.iter().map(|u| prepare(&model, u)).collect::<Result<_, _>>()?;
        let dev_p: Vec<Prepared> = dev_u.iter().map(|u| prepare(&model, u)).collect::<Result<_, _>>()?;
        let opts = TrainOptions {
            max_epochs: spec.max_epochs,
            patience: spec.patience,
            seed: ctx.seed.wrapping_add(stage as u64),
        };
        let report = train_vocoder(&mut model, &train_p, &dev_p, &opts)?;
        let path = ctx.out_dir.join(checkpoint_name(stage, target.as_deref()));
        let ck = model.to_checkpoint(None);
        ck.save(&path)?;
        log::info!("stage {stage} {:?}: wrote {}", target, path.display());
        results.push(StageResult {
            stage,
            target,
            speakers: spks,
            checkpoint: path,
            init_hash,
            final_hash: ck.param_hash(),
            train_utterances: train_p.len(),
            dev_utterances: dev_p.len(),
            report,
        });
    }
    Ok(results)
}

/// Runs every stage in order, chaining checkpoints through `out_dir`.
pub fn run_stage_plan(plan: &StagePlan, ctx: &StageContext<'_>) -> Result<StageRunReport, VocoderError> {
    let mut out = StageRunReport::default();
    for s in &plan.stages {
        let prior = if s.stage > 1 { out.final_of(s.stage - 1).cloned() } else { None };
        let res = run_stage(plan, s.stage, ctx, prior.as_ref())?;
        out.results.extend(res);
    }
    Ok(out)
}
