//! The five preprocessing lanes on a shared temporal axis.
//!
//! Lanes arrive as JSONL files (one [`LaneRecord`] per line) next to a JSON
//! [`CorpusManifest`]. Everything here is immutable once loaded.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::{find_verbs, tokenize};

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Half-open interval `[start, end)` in seconds since the corpus epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start >= end {
            return Err(Error::Validation(format!(
                "window start {start} must precede end {end}"
            )));
        }
        Ok(TimeWindow { start, end })
    }

    pub fn overlaps(&self, other: &TimeWindow) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &TimeWindow) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn union(&self, other: &TimeWindow) -> TimeWindow {
        TimeWindow {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }

    pub fn duration(&self) -> u64 {
        self.end - self.start
    }

    pub fn midpoint2(&self) -> u64 {
        self.start + self.end
    }

    /// 1-based recording day this window starts in.
    pub fn day(&self) -> u32 {
        (self.start / SECONDS_PER_DAY) as u32 + 1
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Ego,
    Exo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraInfo {
    pub id: String,
    pub kind: CameraKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wearer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    pub id: String,
    pub name: String,
}

/// Recorded interval within a day, in seconds of day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySpan {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub days: u32,
    pub epoch: i64,
    pub day_span: DaySpan,
    /// Optional per-day override of `day_span`; when present it has one entry per day.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub day_spans: Vec<DaySpan>,
    pub cameras: Vec<CameraInfo>,
    pub roster: Vec<Person>,
    pub embedding_dim: usize,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let manifest: CorpusManifest = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Validation("manifest declares zero days".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Validation("roster is empty".into()));
        }
        let mut seen = HashSet::new();
        for p in &self.roster {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Validation(format!("duplicate person id {}", p.id)));
            }
        }
        let mut cams = HashSet::new();
        for c in &self.cameras {
            if !cams.insert(c.id.as_str()) {
                return Err(Error::Validation(format!("duplicate camera id {}", c.id)));
            }
            if c.kind == CameraKind::Ego {
                match &c.wearer {
                    Some(w) if self.person(w).is_some() => {}
                    Some(w) => {
                        return Err(Error::Validation(format!(
                            "ego camera {} wearer {w} is not in the roster",
                            c.id
                        )))
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "ego camera {} has no wearer",
                            c.id
                        )))
                    }
                }
            }
        }
        if !self.day_spans.is_empty() && self.day_spans.len() != self.days as usize {
            return Err(Error::Validation(format!(
                "day_spans has {} entries for {} days",
                self.day_spans.len(),
                self.days
            )));
        }
        for span in std::iter::once(&self.day_span).chain(&self.day_spans) {
            if span.start >= span.end || span.end > SECONDS_PER_DAY {
                return Err(Error::Validation(format!(
                    "day span [{}, {}) is not a valid interval within a day",
                    span.start, span.end
                )));
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn camera(&self, id: &str) -> Option<&CameraInfo> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn person(&self, id: &str) -> Option<&Person> {
        self.roster.iter().find(|p| p.id == id)
    }

    pub fn is_exo(&self, camera: &str) -> bool {
        self.camera(camera).is_some_and(|c| c.kind == CameraKind::Exo)
    }

    pub fn span_of_day(&self, day: u32) -> DaySpan {
        self.day_spans
            .get(day.saturating_sub(1) as usize)
            .copied()
            .unwrap_or(self.day_span)
    }

    pub fn day_offset(day: u32) -> u64 {
        (day as u64 - 1) * SECONDS_PER_DAY
    }

    /// Absolute recorded window of `day`.
    pub fn day_window(&self, day: u32) -> TimeWindow {
        let span = self.span_of_day(day);
        let off = Self::day_offset(day);
        TimeWindow {
            start: off + span.start,
            end: off + span.end,
        }
    }

    pub fn window_in_day_span(&self, w: &TimeWindow) -> bool {
        let day = w.day();
        day <= self.days && self.day_window(day).contains(w)
    }

    /// Hour-of-day indices whose hour overlaps the recorded span of `day`.
    pub fn hours(&self, day: u32) -> std::ops::Range<u32> {
        let span = self.span_of_day(day);
        (span.start / 3600) as u32..span.end.div_ceil(3600) as u32
    }

    /// 5-minute slot indices (within the day) overlapping the recorded span.
    pub fn slots(&self, day: u32) -> std::ops::Range<u32> {
        let span = self.span_of_day(day);
        (span.start / 300) as u32..span.end.div_ceil(300) as u32
    }

    pub fn days(&self) -> impl Iterator<Item = u32> {
        1..=self.days
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Identity,
    Caption,
    Object,
    Transcript,
    Action,
}

impl Lane {
    pub const ALL: [Lane; 5] = [
        Lane::Identity,
        Lane::Caption,
        Lane::Object,
        Lane::Transcript,
        Lane::Action,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Lane::Identity => "identity",
            Lane::Caption => "caption",
            Lane::Object => "object",
            Lane::Transcript => "transcript",
            Lane::Action => "action",
        }
    }

    pub fn parse(s: &str) -> Option<Lane> {
        Lane::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five captioning settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    #[serde(rename = "scene_300s")]
    Scene300s,
    #[serde(rename = "narrative_1800s")]
    Narrative1800s,
    ActionVerb,
    AvJoint,
    Reasoning,
}

impl CaptionKind {
    pub const NAMES: [&'static str; 5] = [
        "scene_300s",
        "narrative_1800s",
        "action_verb",
        "av_joint",
        "reasoning",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityBody {
    pub person: Option<String>,
    pub body: Vec<f32>,
    pub face: Vec<f32>,
    pub face_score: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionBody {
    pub text: String,
    pub caption_kind: CaptionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBody {
    pub label: String,
    pub region: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerCandidate {
    pub person: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptBody {
    pub text: String,
    pub speaker_candidates: Vec<SpeakerCandidate>,
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionBody {
    pub verb: String,
    pub actor: String,
    pub co_actors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "lane", rename_all = "snake_case")]
pub enum Payload {
    Identity(IdentityBody),
    Caption(CaptionBody),
    Object(ObjectBody),
    Transcript(TranscriptBody),
    Action(ActionBody),
}

/// One timestamped observation in one lane, flattened on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub camera: String,
    #[serde(flatten)]
    pub window: TimeWindow,
    #[serde(flatten)]
    pub payload: Payload,
}

impl LaneRecord {
    pub fn lane(&self) -> Lane {
        match self.payload {
            Payload::Identity(_) => Lane::Identity,
            Payload::Caption(_) => Lane::Caption,
            Payload::Object(_) => Lane::Object,
            Payload::Transcript(_) => Lane::Transcript,
            Payload::Action(_) => Lane::Action,
        }
    }

    pub fn identity(&self) -> Option<&IdentityBody> {
        match &self.payload {
            Payload::Identity(b) => Some(b),
            _ => None,
        }
    }

    pub fn caption(&self) -> Option<&CaptionBody> {
        match &self.payload {
            Payload::Caption(b) => Some(b),
            _ => None,
        }
    }

    pub fn object(&self) -> Option<&ObjectBody> {
        match &self.payload {
            Payload::Object(b) => Some(b),
            _ => None,
        }
    }

    pub fn transcript(&self) -> Option<&TranscriptBody> {
        match &self.payload {
            Payload::Transcript(b) => Some(b),
            _ => None,
        }
    }

    pub fn action(&self) -> Option<&ActionBody> {
        match &self.payload {
            Payload::Action(b) => Some(b),
            _ => None,
        }
    }

    /// Plain-text rendering used for summaries, indexing and evidence spans.
    pub fn render(&self) -> String {
        match &self.payload {
            Payload::Identity(b) => match &b.person {
                Some(p) => format!("{p} is visible"),
                None => "unidentified person visible".to_string(),
            },
            Payload::Caption(b) => b.text.clone(),
            Payload::Object(b) => format!("{} at {}", b.label, b.region),
            Payload::Transcript(b) => match &b.speaker {
                Some(s) => format!("{s}: \"{}\"", b.text),
                None => format!("\"{}\"", b.text),
            },
            Payload::Action(b) => {
                if b.co_actors.is_empty() {
                    format!("{} {}", b.actor, b.verb)
                } else {
                    format!("{} {} with {}", b.actor, b.verb, b.co_actors.join(", "))
                }
            }
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("lane records always serialize")
    }

    /// Checks every invariant against `manifest`; the error names the first failure.
    pub fn validate(&self, manifest: &CorpusManifest) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if manifest.camera(&self.camera).is_none() {
            return fail(format!("camera {} not in manifest", self.camera));
        }
        if self.window.start >= self.window.end {
            return fail(format!("empty window {}", self.window));
        }
        if !manifest.window_in_day_span(&self.window) {
            return fail(format!("window {} outside the day span", self.window));
        }
        let known = |p: &str| manifest.person(p).is_some();
        let unit = |x: f32| (0.0..=1.0).contains(&x);
        match &self.payload {
            Payload::Identity(b) => {
                if b.body.len() != manifest.embedding_dim || b.face.len() != manifest.embedding_dim
                {
                    return fail(format!(
                        "embedding dimension must be {}",
                        manifest.embedding_dim
                    ));
                }
                if !unit(b.face_score) {
                    return fail(format!("face_score {} outside [0,1]", b.face_score));
                }
                if let Some(p) = &b.person {
                    if !known(p) {
                        return fail(format!("person {p} not in roster"));
                    }
                }
            }
            Payload::Caption(b) => {
                if b.text.trim().is_empty() {
                    return fail("caption text is empty".into());
                }
            }
            Payload::Object(b) => {
                if !unit(b.score) {
                    return fail(format!("object score {} outside [0,1]", b.score));
                }
                if b.label.trim().is_empty() {
                    return fail("object label is empty".into());
                }
            }
            Payload::Transcript(b) => {
                for c in &b.speaker_candidates {
                    if !known(&c.person) {
                        return fail(format!("speaker candidate {} not in roster", c.person));
                    }
                    if !unit(c.score) {
                        return fail(format!("speaker score {} outside [0,1]", c.score));
                    }
                }
                if let Some(s) = &b.speaker {
                    if !known(s) {
                        return fail(format!("speaker {s} not in roster"));
                    }
                }
            }
            Payload::Action(b) => {
                if b.verb.trim().is_empty() {
                    return fail("action verb is empty".into());
                }
                if !known(&b.actor) {
                    return fail(format!("actor {} not in roster", b.actor));
                }
                if b.co_actors.contains(&b.actor) {
                    return fail(format!("actor {} listed as its own co-actor", b.actor));
                }
                if let Some(c) = b.co_actors.iter().find(|c| !known(c)) {
                    return fail(format!("co-actor {c} not in roster"));
                }
            }
        }
        Ok(())
    }
}

fn sort_records(records: &mut [LaneRecord]) {
    records.sort_by(|a, b| {
        (a.window.start, &a.camera).cmp(&(b.window.start, &b.camera))
    });
}

/// Parses one JSONL line; enumerated fields are checked before typed decoding
/// so that an unknown caption kind is reported as a validation failure.
pub fn parse_lane_line(line: &str, line_no: usize, manifest: &CorpusManifest) -> Result<LaneRecord> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let lane = value.get("lane").and_then(Value::as_str).unwrap_or("");
    if Lane::parse(lane).is_none() {
        return Err(Error::Validation(format!("line {line_no}: unknown lane {lane:?}")));
    }
    if lane == "caption" {
        let kind = value.get("caption_kind").and_then(Value::as_str).unwrap_or("");
        if !CaptionKind::NAMES.contains(&kind) {
            return Err(Error::Validation(format!(
                "line {line_no}: caption_kind {kind:?} is not one of {:?}",
                CaptionKind::NAMES
            )));
        }
    }
    let record: LaneRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    record
        .validate(manifest)
        .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
    Ok(record)
}

pub fn load_lane(path: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<Vec<LaneRecord>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lane_str(&raw, manifest)
}

pub fn parse_lane_str(raw: &str, manifest: &CorpusManifest) -> Result<Vec<LaneRecord>> {
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_lane_line(line, i + 1, manifest)?);
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn write_lane(path: impl AsRef<Path>, records: &[LaneRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// All five lanes of a corpus, each sorted by `(start, camera)`.
#[derive(Debug, Clone, Default)]
pub struct LaneStore {
    lanes: BTreeMap<Lane, Vec<LaneRecord>>,
}

impl LaneStore {
    pub fn new(records: impl IntoIterator<Item = LaneRecord>) -> Self {
        let mut lanes: BTreeMap<Lane, Vec<LaneRecord>> = BTreeMap::new();
        for r in records {
            lanes.entry(r.lane()).or_default().push(r);
        }
        for list in lanes.values_mut() {
            sort_records(list);
        }
        LaneStore { lanes }
    }

    /// Loads every `<lane>.jsonl` present in `dir`; absent lanes are empty.
    pub fn load_dir(dir: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<Self> {
        let dir = dir.as_ref();
        let mut lanes = BTreeMap::new();
        for lane in Lane::ALL {
            let path = dir.join(format!("{lane}.jsonl"));
            if path.exists() {
                lanes.insert(lane, load_lane(&path, manifest)?);
            }
        }
        Ok(LaneStore { lanes })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for lane in Lane::ALL {
            write_lane(dir.join(format!("{lane}.jsonl")), self.lane(lane))?;
        }
        Ok(())
    }

    pub fn lane(&self, lane: Lane) -> &[LaneRecord] {
        self.lanes.get(&lane).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn replace(&mut self, lane: Lane, mut records: Vec<LaneRecord>) {
        sort_records(&mut records);
        self.lanes.insert(lane, records);
    }

    pub fn all(&self) -> impl Iterator<Item = &LaneRecord> {
        self.lanes.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.lanes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateThresholds {
    pub body: f64,
    pub face: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            body: 0.80,
            face: 0.70,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateDecision {
    Propagate(String),
    Reject,
}

/// Cross-camera identity propagation: the candidate inherits the anchor's
/// person only when its body matches the anchor's body and its face matches
/// that person's centroid.
pub fn gate_identity_propagation(
    candidate: &LaneRecord,
    anchor: &LaneRecord,
    centroids: &BTreeMap<String, Vec<f32>>,
    thresholds: GateThresholds,
) -> Result<GateDecision> {
    let (Some(cand), Some(anch)) = (candidate.identity(), anchor.identity()) else {
        return Err(Error::Validation(
            "identity gating needs two identity records".into(),
        ));
    };
    let Some(person) = &anch.person else {
        return Err(Error::Validation("anchor has no resolved person".into()));
    };
    let body_sim = cosine(&cand.body, &anch.body)?;
    let Some(centroid) = centroids.get(person) else {
        return Ok(GateDecision::Reject);
    };
    let face_sim = cosine(&cand.face, centroid)?;
    if body_sim >= thresholds.body && face_sim >= thresholds.face {
        Ok(GateDecision::Propagate(person.clone()))
    } else {
        Ok(GateDecision::Reject)
    }
}

/// Fixed-camera speaker consensus. Exo transcript speakers are restricted to
/// candidates corroborated both by a concurrent transcript on another camera
/// and by the identity lane; ego records pass through unchanged.
pub fn resolve_speakers_consensus(
    records: &[LaneRecord],
    identity: &[LaneRecord],
    manifest: &CorpusManifest,
) -> Vec<LaneRecord> {
    records
        .iter()
        .map(|rec| {
            let Some(body) = rec.transcript() else {
                return rec.clone();
            };
            if !manifest.is_exo(&rec.camera) {
                return rec.clone();
            }
            let corroborated_by_transcript = |p: &str| {
                records.iter().any(|other| {
                    other.camera != rec.camera
                        && other.window.overlaps(&rec.window)
                        && other.transcript().is_some_and(|t| {
                            t.speaker.as_deref() == Some(p)
                                || t.speaker_candidates.iter().any(|c| c.person == p)
                        })
                })
            };
            let placed_by_identity = |p: &str| {
                identity.iter().any(|id| {
                    id.window.overlaps(&rec.window)
                        && id.identity().and_then(|b| b.person.as_deref()) == Some(p)
                })
            };
            let best = body
                .speaker_candidates
                .iter()
                .filter(|c| corroborated_by_transcript(&c.person) && placed_by_identity(&c.person))
                .max_by(|a, b| {
                    a.score
                        .total_cmp(&b.score)
                        .then_with(|| b.person.cmp(&a.person))
                })
                .map(|c| c.person.clone());
            let mut out = rec.clone();
            if let Payload::Transcript(t) = &mut out.payload {
                t.speaker = best;
            }
            out
        })
        .collect()
}

/// `(time-span, verb, co-actors)` tuple of the per-person action timeline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionTuple {
    pub span: TimeWindow,
    pub verb: String,
    pub actor: String,
    pub co_actors: BTreeSet<String>,
}

impl ActionTuple {
    pub fn from_record(rec: &LaneRecord) -> Option<ActionTuple> {
        let a = rec.action()?;
        Some(ActionTuple {
            span: rec.window,
            verb: a.verb.clone(),
            actor: a.actor.clone(),
            co_actors: a.co_actors.iter().filter(|c| **c != a.actor).cloned().collect(),
        })
    }
}

/// Extractive action timeline: one tuple per lexicon verb found in each
/// `action_verb` caption. The actor is the identified person on the caption's
/// camera (preferring one named in the text); everyone else identified on any
/// camera during the window is a co-actor.
pub fn build_action_timeline(
    captions: &[LaneRecord],
    identity: &[LaneRecord],
    verb_lexicon: &BTreeSet<String>,
) -> Vec<ActionTuple> {
    let mut out = Vec::new();
    for cap in captions {
        let Some(body) = cap.caption() else { continue };
        if body.caption_kind != CaptionKind::ActionVerb {
            continue;
        }
        let tokens = tokenize(&body.text);
        let verbs = find_verbs(&tokens, verb_lexicon);
        if verbs.is_empty() {
            continue;
        }
        let overlapping: Vec<(&LaneRecord, &str, f32)> = identity
            .iter()
            .filter(|r| r.window.overlaps(&cap.window))
            .filter_map(|r| {
                let b = r.identity()?;
                Some((r, b.person.as_deref()?, b.face_score))
            })
            .collect();
        let local: Vec<(&str, f32)> = overlapping
            .iter()
            .filter(|(r, _, _)| r.camera == cap.camera)
            .map(|(_, p, s)| (*p, *s))
            .collect();
        let named = local
            .iter()
            .filter(|(p, _)| tokens.iter().any(|t| t == &p.to_lowercase()))
            .map(|(p, _)| *p)
            .min();
        let actor = named.or_else(|| {
            local
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(p, _)| *p)
        });
        let Some(actor) = actor else { continue };
        let co_actors: BTreeSet<String> = overlapping
            .iter()
            .map(|(_, p, _)| *p)
            .filter(|p| *p != actor)
            .map(str::to_string)
            .collect();
        for verb in verbs {
            out.push(ActionTuple {
                span: cap.window,
                verb,
                actor: actor.to_string(),
                co_actors: co_actors.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest() -> CorpusManifest {
        CorpusManifest {
            days: 2,
            epoch: 1_700_000_000,
            day_span: DaySpan {
                start: 8 * 3600,
                end: 10 * 3600,
            },
            day_spans: vec![],
            cameras: vec![
                CameraInfo {
                    id: "ego1".into(),
                    kind: CameraKind::Ego,
                    wearer: Some("alice".into()),
                },
                CameraInfo {
                    id: "ego2".into(),
                    kind: CameraKind::Ego,
                    wearer: Some("bob".into()),
                },
                CameraInfo {
                    id: "exo1".into(),
                    kind: CameraKind::Exo,
                    wearer: None,
                },
            ],
            roster: ["alice", "bob", "p3", "p7"]
                .iter()
                .map(|p| Person {
                    id: p.to_string(),
                    name: p.to_string(),
                })
                .collect(),
            embedding_dim: 2,
        }
    }

    fn at(start: u64, end: u64) -> TimeWindow {
        TimeWindow { start, end }
    }

    const T0: u64 = 8 * 3600;

    fn transcript(cam: &str, w: TimeWindow, cands: &[(&str, f32)], speaker: Option<&str>) -> LaneRecord {
        LaneRecord {
            camera: cam.into(),
            window: w,
            payload: Payload::Transcript(TranscriptBody {
                text: "hello".into(),
                speaker_candidates: cands
                    .iter()
                    .map(|(p, s)| SpeakerCandidate {
                        person: p.to_string(),
                        score: *s,
                    })
                    .collect(),
                speaker: speaker.map(str::to_string),
            }),
        }
    }

    fn ident(cam: &str, w: TimeWindow, person: Option<&str>, body: [f32; 2], face: [f32; 2]) -> LaneRecord {
        LaneRecord {
            camera: cam.into(),
            window: w,
            payload: Payload::Identity(IdentityBody {
                person: person.map(str::to_string),
                body: body.to_vec(),
                face: face.to_vec(),
                face_score: 0.9,
            }),
        }
    }

    fn caption(cam: &str, w: TimeWindow, text: &str, kind: CaptionKind) -> LaneRecord {
        LaneRecord {
            camera: cam.into(),
            window: w,
            payload: Payload::Caption(CaptionBody {
                text: text.into(),
                caption_kind: kind,
            }),
        }
    }

    #[test]
    fn manifest_validation() {
        let m = manifest();
        assert!(m.validate().is_ok());

        let mut empty = m.clone();
        empty.roster.clear();
        assert!(matches!(empty.validate(), Err(Error::Validation(_))));

        let mut dup = m.clone();
        dup.cameras[1].id = "exo1".into();
        dup.cameras[1].kind = CameraKind::Exo;
        assert!(matches!(dup.validate(), Err(Error::Validation(_))));

        let mut wearerless = m.clone();
        wearerless.cameras[0].wearer = None;
        assert!(matches!(wearerless.validate(), Err(Error::Validation(_))));

        let mut bad_span = m;
        bad_span.day_span = DaySpan { start: 10, end: 10 };
        assert!(matches!(bad_span.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_manifest_is_parse_error() {
        assert!(matches!(
            CorpusManifest::from_json("{\"days\": 2,"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn load_sorts_and_validates() {
        let m = manifest();
        let lines = [
            transcript("exo1", at(T0 + 30, T0 + 40), &[("p3", 0.5)], None),
            transcript("ego1", at(T0 + 10, T0 + 20), &[], Some("alice")),
            transcript("ego2", at(T0 + 10, T0 + 15), &[], Some("bob")),
        ]
        .iter()
        .map(LaneRecord::to_json_line)
        .collect::<Vec<_>>()
        .join("\n");
        let recs = parse_lane_str(&lines, &m).unwrap();
        let order: Vec<_> = recs.iter().map(|r| (r.window.start, r.camera.as_str())).collect();
        assert_eq!(
            order,
            vec![(T0 + 10, "ego1"), (T0 + 10, "ego2"), (T0 + 30, "exo1")]
        );
    }

    #[test]
    fn load_rejects_unknown_camera_and_kind() {
        let m = manifest();
        let ghost = transcript("ghost", at(T0, T0 + 5), &[], None).to_json_line();
        assert!(matches!(parse_lane_str(&ghost, &m), Err(Error::Validation(_))));

        let ok = caption("ego1", at(T0, T0 + 5), "scene", CaptionKind::Scene300s).to_json_line();
        assert!(parse_lane_str(&ok, &m).is_ok());
        let bad = ok.replace("scene_300s", "scene_42s");
        assert!(matches!(parse_lane_str(&bad, &m), Err(Error::Validation(_))));

        let garbage = format!("{ok}\n{{not json");
        match parse_lane_str(&garbage, &m) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn window_outside_day_span_rejected() {
        let m = manifest();
        let early = transcript("ego1", at(100, 200), &[], None).to_json_line();
        assert!(matches!(parse_lane_str(&early, &m), Err(Error::Validation(_))));
    }

    #[test]
    fn wrong_embedding_dim_rejected() {
        let m = manifest();
        let mut r = ident("ego1", at(T0, T0 + 5), Some("alice"), [1.0, 0.0], [1.0, 0.0]);
        if let Payload::Identity(b) = &mut r.payload {
            b.body.push(0.0);
        }
        assert!(r.validate(&m).is_err());
    }

    fn centroids() -> BTreeMap<String, Vec<f32>> {
        BTreeMap::from([("alice".to_string(), vec![1.0, 0.0])])
    }

    #[test]
    fn gate_self_similarity_propagates() {
        let anchor = ident("ego1", at(T0, T0 + 5), Some("alice"), [0.6, 0.8], [1.0, 0.0]);
        let cand = ident("exo1", at(T0, T0 + 5), None, [0.6, 0.8], [1.0, 0.0]);
        let d = gate_identity_propagation(&cand, &anchor, &centroids(), GateThresholds::default());
        assert_eq!(d.unwrap(), GateDecision::Propagate("alice".into()));
    }

    #[test]
    fn gate_orthogonal_face_rejects() {
        let anchor = ident("ego1", at(T0, T0 + 5), Some("alice"), [0.6, 0.8], [1.0, 0.0]);
        let cand = ident("exo1", at(T0, T0 + 5), None, [0.6, 0.8], [0.0, 1.0]);
        let d = gate_identity_propagation(&cand, &anchor, &centroids(), GateThresholds::default());
        assert_eq!(d.unwrap(), GateDecision::Reject);
    }

    #[test]
    fn gate_hand_built_cosines() {
        // body cosine 0.82, face cosine 0.71 by construction
        let b = (1.0f64 - 0.82 * 0.82).sqrt() as f32;
        let f = (1.0f64 - 0.71 * 0.71).sqrt() as f32;
        let anchor = ident("ego1", at(T0, T0 + 5), Some("alice"), [1.0, 0.0], [1.0, 0.0]);
        let cand = ident("exo1", at(T0, T0 + 5), None, [0.82, b], [0.71, f]);
        // oracle: direct dot products of unit vectors
        let body_dot = 1.0 * 0.82f32 as f64;
        let face_dot = 1.0 * 0.71f32 as f64;
        assert!(body_dot >= 0.8 && face_dot >= 0.7);
        let d = gate_identity_propagation(
            &cand,
            &anchor,
            &centroids(),
            GateThresholds { body: 0.8, face: 0.7 },
        );
        assert_eq!(d.unwrap(), GateDecision::Propagate("alice".into()));
        let strict = gate_identity_propagation(
            &cand,
            &anchor,
            &centroids(),
            GateThresholds { body: 0.83, face: 0.7 },
        );
        assert_eq!(strict.unwrap(), GateDecision::Reject);
    }

    #[test]
    fn gate_dimension_mismatch() {
        let anchor = ident("ego1", at(T0, T0 + 5), Some("alice"), [1.0, 0.0], [1.0, 0.0]);
        let mut cand = anchor.clone();
        if let Payload::Identity(b) = &mut cand.payload {
            b.body = vec![1.0, 0.0, 0.0];
        }
        assert!(matches!(
            gate_identity_propagation(&cand, &anchor, &centroids(), GateThresholds::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Exhaustive scan used as the consensus oracle.
    fn consensus_oracle(records: &[LaneRecord], identity: &[LaneRecord], idx: usize) -> Option<String> {
        let rec = &records[idx];
        let t = rec.transcript().unwrap();
        let mut allowed: Vec<(&str, f32)> = Vec::new();
        for c in &t.speaker_candidates {
            let mut by_transcript = false;
            for (j, o) in records.iter().enumerate() {
                if j == idx || o.camera == rec.camera {
                    continue;
                }
                let ot = o.transcript().unwrap();
                let names = ot.speaker.iter().chain(ot.speaker_candidates.iter().map(|c| &c.person));
                if o.window.start < rec.window.end
                    && rec.window.start < o.window.end
                    && names.into_iter().any(|n| n == &c.person)
                {
                    by_transcript = true;
                }
            }
            let mut by_identity = false;
            for id in identity {
                if id.window.start < rec.window.end
                    && rec.window.start < id.window.end
                    && id.identity().unwrap().person.as_deref() == Some(c.person.as_str())
                {
                    by_identity = true;
                }
            }
            if by_transcript && by_identity {
                allowed.push((&c.person, c.score));
            }
        }
        allowed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        allowed.first().map(|(p, _)| p.to_string())
    }

    #[test]
    fn consensus_prefers_corroborated_candidate() {
        let m = manifest();
        let records = vec![
            transcript("exo1", at(T0, T0 + 20), &[("p3", 0.4), ("p7", 0.9)], None),
            transcript("ego1", at(T0 + 5, T0 + 15), &[("p3", 0.8)], Some("p3")),
            transcript("ego2", at(T0 + 100, T0 + 120), &[("p7", 0.8)], Some("p7")),
            transcript("exo1", at(T0 + 200, T0 + 210), &[("p7", 0.6)], None),
            transcript("ego1", at(T0 + 300, T0 + 310), &[], Some("alice")),
        ];
        let identity = vec![
            ident("ego1", at(T0, T0 + 30), Some("p3"), [1.0, 0.0], [1.0, 0.0]),
            ident("ego2", at(T0 + 100, T0 + 130), Some("p7"), [1.0, 0.0], [1.0, 0.0]),
        ];
        let out = resolve_speakers_consensus(&records, &identity, &m);
        for i in 0..records.len() {
            let got = out[i].transcript().unwrap().speaker.clone();
            if m.is_exo(&records[i].camera) {
                assert_eq!(got, consensus_oracle(&records, &identity, i), "record {i}");
            } else {
                assert_eq!(out[i], records[i]);
            }
        }
        assert_eq!(out[0].transcript().unwrap().speaker.as_deref(), Some("p3"));
        assert_eq!(out[3].transcript().unwrap().speaker, None);
    }

    #[test]
    fn consensus_tie_breaks_on_person_id() {
        let m = manifest();
        let records = vec![
            transcript("exo1", at(T0, T0 + 20), &[("p7", 0.5), ("p3", 0.5)], None),
            transcript("ego1", at(T0, T0 + 20), &[("p3", 0.5), ("p7", 0.5)], None),
        ];
        let identity = vec![
            ident("ego1", at(T0, T0 + 30), Some("p3"), [1.0, 0.0], [1.0, 0.0]),
            ident("ego2", at(T0, T0 + 30), Some("p7"), [1.0, 0.0], [1.0, 0.0]),
        ];
        let out = resolve_speakers_consensus(&records, &identity, &m);
        assert_eq!(out[0].transcript().unwrap().speaker.as_deref(), Some("p3"));
    }

    fn lexicon(verbs: &[&str]) -> BTreeSet<String> {
        verbs.iter().map(|v| v.to_string()).collect()
    }

    #[test]
    fn action_timeline_single_actor() {
        let w = at(T0, T0 + 60);
        let caps = vec![caption("ego1", w, "Alice chops vegetables", CaptionKind::ActionVerb)];
        let ids = vec![ident("ego1", w, Some("alice"), [1.0, 0.0], [1.0, 0.0])];
        let out = build_action_timeline(&caps, &ids, &lexicon(&["chop"]));
        assert_eq!(
            out,
            vec![ActionTuple {
                span: w,
                verb: "chop".into(),
                actor: "alice".into(),
                co_actors: BTreeSet::new(),
            }]
        );
    }

    #[test]
    fn action_timeline_co_actor_and_two_verbs() {
        let w = at(T0, T0 + 60);
        let caps = vec![
            caption("ego1", w, "Alice chops and washes vegetables", CaptionKind::ActionVerb),
            caption("ego1", w, "Alice chops vegetables", CaptionKind::Scene300s),
        ];
        let ids = vec![
            ident("ego1", w, Some("alice"), [1.0, 0.0], [1.0, 0.0]),
            ident("ego2", at(T0 + 30, T0 + 90), Some("bob"), [1.0, 0.0], [1.0, 0.0]),
        ];
        let lex = lexicon(&["chop", "wash", "stir"]);
        let out = build_action_timeline(&caps, &ids, &lex);
        // oracle: substring scan of the action_verb caption for each lexicon verb
        let expected: Vec<&str> = lex
            .iter()
            .filter(|v| "alice chops and washes vegetables".contains(v.as_str()))
            .map(String::as_str)
            .collect();
        assert_eq!(out.iter().map(|t| t.verb.as_str()).collect::<Vec<_>>(), expected);
        for t in &out {
            assert_eq!(t.span, w);
            assert_eq!(t.actor, "alice");
            assert_eq!(t.co_actors, BTreeSet::from(["bob".to_string()]));
        }
    }

    #[test]
    fn action_timeline_drops_unresolved_actor() {
        let w = at(T0, T0 + 60);
        let caps = vec![caption("exo1", w, "Someone chops onions", CaptionKind::ActionVerb)];
        let ids = vec![ident("ego1", w, Some("alice"), [1.0, 0.0], [1.0, 0.0])];
        assert!(build_action_timeline(&caps, &ids, &lexicon(&["chop"])).is_empty());
    }
}
