//! Parallel-pair bookkeeping for a semiparallel corpus.
//!
//! Utterances are natural recordings, synthetic counterparts of a natural
//! utterance produced by the other side's TTS voice ("pseudo"), or synthetic
//! renderings of external text. Pairs are matched by content id:
//!
//! | type | source kind | target kind |
//! |------|-------------|-------------|
//! | 1 | natural | natural |
//! | 2 | pseudo | natural |
//! | 3 | natural | pseudo |
//! | 4 | external | external |
//!
//! A content with natural recordings on both sides yields only its type-1
//! pair; pseudo counterparts count only where a natural partner is missing.
//! Speech synthesis itself is an external command.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("request: {0}")]
    Request(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceKind {
    Natural,
    SyntheticPseudo,
    SyntheticExternal,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker_id: String,
    pub content_id: String,
    pub kind: UtteranceKind,
    pub audio_path: PathBuf,
}

impl UtteranceRecord {
    pub fn new(speaker: &str, content: &str, kind: UtteranceKind, audio_path: impl Into<PathBuf>) -> Self {
        Self { speaker_id: speaker.into(), content_id: content.into(), kind, audio_path: audio_path.into() }
    }

    fn key(&self) -> (&str, &str, UtteranceKind) {
        (&self.speaker_id, &self.content_id, self.kind)
    }
}

/// A validated set of records, unique by (speaker, content, kind).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self, PairingError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.speaker_id.is_empty() || r.content_id.is_empty() {
                return Err(PairingError::Manifest("empty speaker or content id".into()));
            }
            if !seen.insert(r.key()) {
                return Err(PairingError::Manifest(format!(
                    "duplicate record ({}, {}, {:?})",
                    r.speaker_id, r.content_id, r.kind
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.speaker_id.as_str()).collect()
    }

    fn contents(&self, kind: UtteranceKind) -> BTreeMap<&str, Vec<&UtteranceRecord>> {
        let mut m: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.kind == kind) {
            m.entry(&r.content_id).or_default().push(r);
        }
        m
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), PairingError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, PairingError> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Self::new(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PairingError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PairingError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        Ok(f.flush()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: UtteranceRecord,
    pub target: UtteranceRecord,
    pub pair_type: u8,
}

/// The pair type for a (source kind, target kind) combination, if any.
pub fn pair_type(source: UtteranceKind, target: UtteranceKind) -> Option<u8> {
    use UtteranceKind::*;
    match (source, target) {
        (Natural, Natural) => Some(1),
        (SyntheticPseudo, Natural) => Some(2),
        (Natural, SyntheticPseudo) => Some(3),
        (SyntheticExternal, SyntheticExternal) => Some(4),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub type1: usize,
    pub type2: usize,
    pub type3: usize,
    pub type4: usize,
}

impl PairCounts {
    pub fn total(&self) -> usize {
        self.type1 + self.type2 + self.type3 + self.type4
    }

    fn bump(&mut self, t: u8) {
        match t {
            1 => self.type1 += 1,
            2 => self.type2 += 1,
            3 => self.type3 += 1,
            _ => self.type4 += 1,
        }
    }
}

/// All parallel pairs between the two sides, sorted by content id, type and
/// record identity.
pub fn enumerate_pairs(source: &Manifest, target: &Manifest) -> (Vec<ParallelPair>, PairCounts) {
    use UtteranceKind::*;
    let (s_nat, t_nat) = (source.contents(Natural), target.contents(Natural));
    let (s_ps, t_ps) = (source.contents(SyntheticPseudo), target.contents(SyntheticPseudo));
    let (s_ext, t_ext) = (source.contents(SyntheticExternal), target.contents(SyntheticExternal));
    let mut pairs = Vec::new();
    let mut cross = |a: &BTreeMap<&str, Vec<&UtteranceRecord>>,
                     b: &BTreeMap<&str, Vec<&UtteranceRecord>>,
                     skip: &dyn Fn(&str) -> bool,
                     t: u8| {
        for (c, srcs) in a {
            if skip(c) {
                continue;
            }
            if let Some(tgts) = b.get(c) {
                for s in srcs {
                    for g in tgts {
                        pairs.push(ParallelPair { source: (*s).clone(), target: (*g).clone(), pair_type: t });
                    }
                }
            }
        }
    };
    cross(&s_nat, &t_nat, &|_| false, 1);
    cross(&s_ps, &t_nat, &|c| s_nat.contains_key(c), 2);
    cross(&s_nat, &t_ps, &|c| t_nat.contains_key(c), 3);
    cross(&s_ext, &t_ext, &|_| false, 4);
    pairs.sort_by(|a, b| {
        (&a.source.content_id, a.pair_type, &a.source, &a.target).cmp(&(
            &b.source.content_id,
            b.pair_type,
            &b.source,
            &b.target,
        ))
    });
    pairs.dedup_by(|a, b| a.source == b.source && a.target == b.target);
    let mut counts = PairCounts::default();
    for p in &pairs {
        counts.bump(p.pair_type);
    }
    (pairs, counts)
}

pub fn write_pairs_jsonl(pairs: &[ParallelPair], mut out: impl Write) -> Result<(), PairingError> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// One utterance the external TTS must produce.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TtsRequest {
    pub content_id: String,
    /// Transcript reference: a content id for corpus texts, the text itself
    /// for external texts.
    pub text_ref: String,
    pub producing_speaker: String,
    pub kind: UtteranceKind,
}

fn single_speaker(m: &Manifest, side: &str) -> Result<Option<String>, PairingError> {
    let s = m.speakers();
    match s.len() {
        0 => Ok(None),
        1 => Ok(s.into_iter().next().map(str::to_string)),
        n => Err(PairingError::Manifest(format!("{side} manifest holds {n} speakers"))),
    }
}

/// Pseudo-parallel counterparts: one request per natural content present on
/// one side only, voiced by the other side's speaker.
pub fn pseudo_parallel_requests(source: &Manifest, target: &Manifest) -> Result<Vec<TtsRequest>, PairingError> {
    let s_spk = single_speaker(source, "source")?;
    let t_spk = single_speaker(target, "target")?;
    let s_nat = source.contents(UtteranceKind::Natural);
    let t_nat = target.contents(UtteranceKind::Natural);
    let mut out = Vec::new();
    for (a, b, spk) in [(&s_nat, &t_nat, &t_spk), (&t_nat, &s_nat, &s_spk)] {
        for c in a.keys().filter(|c| !b.contains_key(*c)) {
            let spk = spk
                .as_ref()
                .ok_or_else(|| PairingError::Manifest(format!("no speaker to voice content {c}")))?;
            out.push(TtsRequest {
                content_id: c.to_string(),
                text_ref: c.to_string(),
                producing_speaker: spk.clone(),
                kind: UtteranceKind::SyntheticPseudo,
            });
        }
    }
    out.sort();
    Ok(out)
}

/// Content id of an external text: a prefix of its SHA-256.
pub fn text_content_id(text: &str) -> String {
    format!("ext_{}", &hex::encode(Sha256::digest(text.as_bytes()))[..16])
}

/// `|unique texts| x |speakers|` requests; texts are deduplicated by content
/// hash and share content ids across speakers.
pub fn external_requests(texts: &[String], speakers: &[String]) -> Result<Vec<TtsRequest>, PairingError> {
    if texts.is_empty() {
        return Err(PairingError::Request("external text list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in texts {
        let id = text_content_id(t);
        if !seen.insert(id.clone()) {
            continue;
        }
        for s in speakers {
            out.push(TtsRequest {
                content_id: id.clone(),
                text_ref: t.clone(),
                producing_speaker: s.clone(),
                kind: UtteranceKind::SyntheticExternal,
            });
        }
    }
    Ok(out)
}

pub fn write_requests_jsonl(reqs: &[TtsRequest], mut out: impl Write) -> Result<(), PairingError> {
    for r in reqs {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// External synthesizer invoked as `program [args..] <text-file> <speaker-id> <out-wav>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsFailure {
    pub request: TtsRequest,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TtsOutcome {
    pub produced: Vec<UtteranceRecord>,
    pub failed: Vec<TtsFailure>,
}

impl TtsCommand {
    /// Runs every request; failures are recorded and left out of `produced`.
    /// `texts` maps corpus content ids to transcripts (external requests
    /// carry their own text).
    pub fn run(
        &self,
        requests: &[TtsRequest],
        texts: &BTreeMap<String, String>,
        out_dir: &Path,
    ) -> Result<TtsOutcome, PairingError> {
        let text_dir = out_dir.join("text");
        std::fs::create_dir_all(&text_dir)?;
        let mut outcome = TtsOutcome::default();
        for r in requests {
            let text = match r.kind {
                UtteranceKind::SyntheticExternal => Some(r.text_ref.clone()),
                _ => texts.get(&r.text_ref).cloned(),
            };
            let Some(text) = text else {
                outcome.failed.push(TtsFailure { request: r.clone(), reason: "no transcript".into() });
                continue;
            };
            let text_path = text_dir.join(format!("{}.txt", r.content_id));
            std::fs::write(&text_path, text)?;
            let spk_dir = out_dir.join(&r.producing_speaker);
            std::fs::create_dir_all(&spk_dir)?;
            let wav = spk_dir.join(format!("{}.wav", r.content_id));
            let status = Command::new(&self.program)
                .args(&self.args)
                .arg(&text_path)
                .arg(&r.producing_speaker)
                .arg(&wav)
                .status();
            match status {
                Ok(s) if s.success() && wav.exists() => outcome.produced.push(UtteranceRecord::new(
                    &r.producing_speaker,
                    &r.content_id,
                    r.kind,
                    wav,
                )),
                Ok(s) => outcome.failed.push(TtsFailure { request: r.clone(), reason: format!("exit status {s}") }),
                Err(e) => outcome.failed.push(TtsFailure { request: r.clone(), reason: e.to_string() }),
            }
        }
        Ok(outcome)
    }
}
