//! Temporal hierarchy: (day, hour) cells, 15-minute buckets and
//! (camera, 5-minute) sub-windows, plus the per-key summary documents that
//! retrieval indexes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, ModelRequest, ReplySchema, RoleTag, UserPart};
use crate::lane::{CorpusManifest, Lane, LaneRecord, TimeWindow, SECONDS_PER_DAY};

pub const HOUR: u64 = 3600;
pub const BUCKET: u64 = 900;
pub const SLOT: u64 = 300;
pub const SLOTS_PER_BUCKET: u32 = 3;
/// Default expansion: one slot before the anchor bucket and two after,
/// six slots in all.
pub const DEFAULT_SPAN_BEFORE: u32 = 1;
pub const DEFAULT_SPAN_AFTER: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub day: u32,
    pub hour: u32,
}

impl CellKey {
    pub fn window(&self) -> TimeWindow {
        let start = CorpusManifest::day_offset(self.day) + self.hour as u64 * HOUR;
        TimeWindow {
            start,
            end: start + HOUR,
        }
    }

    pub fn buckets(&self) -> impl Iterator<Item = BucketKey> + '_ {
        (0..4).map(move |quarter| BucketKey { cell: *self, quarter })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BucketKey {
    pub cell: CellKey,
    pub quarter: u8,
}

impl BucketKey {
    pub fn window(&self) -> TimeWindow {
        let start = self.cell.window().start + self.quarter as u64 * BUCKET;
        TimeWindow {
            start,
            end: start + BUCKET,
        }
    }

    /// First 5-minute slot (within the day) covered by this bucket.
    pub fn first_slot(&self) -> u32 {
        self.cell.hour * 12 + self.quarter as u32 * SLOTS_PER_BUCKET
    }

    /// Linear position on the day-major bucket axis; neighbours differ by one.
    pub fn ordinal(&self) -> i64 {
        (self.cell.day as i64) * 96 + self.cell.hour as i64 * 4 + self.quarter as i64
    }

    pub fn containing(t: u64) -> BucketKey {
        let day = (t / SECONDS_PER_DAY) as u32 + 1;
        let sod = t % SECONDS_PER_DAY;
        BucketKey {
            cell: CellKey {
                day,
                hour: (sod / HOUR) as u32,
            },
            quarter: ((sod % HOUR) / BUCKET) as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubWindowKey {
    pub camera: String,
    pub day: u32,
    pub slot: u32,
}

impl SubWindowKey {
    pub fn window(&self) -> TimeWindow {
        let start = CorpusManifest::day_offset(self.day) + self.slot as u64 * SLOT;
        TimeWindow {
            start,
            end: start + SLOT,
        }
    }

    pub fn bucket(&self) -> BucketKey {
        BucketKey::containing(self.window().start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Cell,
    Bucket,
    Subwindow,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Cell => "cell",
            Granularity::Bucket => "bucket",
            Granularity::Subwindow => "subwindow",
        }
    }
}

/// Any retrievable temporal unit. The string form doubles as the document id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DocKey {
    Cell(CellKey),
    Bucket(BucketKey),
    SubWindow(SubWindowKey),
}

impl DocKey {
    pub fn window(&self) -> TimeWindow {
        match self {
            DocKey::Cell(k) => k.window(),
            DocKey::Bucket(k) => k.window(),
            DocKey::SubWindow(k) => k.window(),
        }
    }

    pub fn camera(&self) -> Option<&str> {
        match self {
            DocKey::SubWindow(k) => Some(&k.camera),
            _ => None,
        }
    }

    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}h{:02}", self.day, self.hour)
    }
}

impl fmt::Display for BucketKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}q{}", self.cell, self.quarter)
    }
}

impl fmt::Display for SubWindowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@d{}s{:03}", self.camera, self.day, self.slot)
    }
}

impl fmt::Display for DocKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DocKey::Cell(k) => k.fmt(f),
            DocKey::Bucket(k) => k.fmt(f),
            DocKey::SubWindow(k) => k.fmt(f),
        }
    }
}

fn bad_key(s: &str) -> Error {
    Error::Validation(format!("malformed key {s:?}"))
}

fn parse_cell(s: &str) -> Result<CellKey> {
    let rest = s.strip_prefix('d').ok_or_else(|| bad_key(s))?;
    let (day, hour) = rest.split_once('h').ok_or_else(|| bad_key(s))?;
    Ok(CellKey {
        day: day.parse().map_err(|_| bad_key(s))?,
        hour: hour.parse().map_err(|_| bad_key(s))?,
    })
}

impl FromStr for CellKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_cell(s)
    }
}

impl FromStr for BucketKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (cell, q) = s.split_once('q').ok_or_else(|| bad_key(s))?;
        let quarter: u8 = q.parse().map_err(|_| bad_key(s))?;
        if quarter > 3 {
            return Err(bad_key(s));
        }
        Ok(BucketKey {
            cell: parse_cell(cell)?,
            quarter,
        })
    }
}

impl FromStr for SubWindowKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (camera, rest) = s.rsplit_once('@').ok_or_else(|| bad_key(s))?;
        let rest = rest.strip_prefix('d').ok_or_else(|| bad_key(s))?;
        let (day, slot) = rest.split_once('s').ok_or_else(|| bad_key(s))?;
        Ok(SubWindowKey {
            camera: camera.to_string(),
            day: day.parse().map_err(|_| bad_key(s))?,
            slot: slot.parse().map_err(|_| bad_key(s))?,
        })
    }
}

impl FromStr for DocKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.contains('@') {
            Ok(DocKey::SubWindow(s.parse()?))
        } else if s.contains('q') {
            Ok(DocKey::Bucket(s.parse()?))
        } else {
            Ok(DocKey::Cell(s.parse()?))
        }
    }
}

macro_rules! string_serde {
    ($($t:ty),*) => {$(
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

string_serde!(CellKey, BucketKey, SubWindowKey, DocKey);

/// Every key of `granularity` the manifest defines, in key order.
pub fn enumerate_keys(manifest: &CorpusManifest, granularity: Granularity) -> Vec<DocKey> {
    let mut keys = Vec::new();
    for day in manifest.days() {
        match granularity {
            Granularity::Cell => {
                keys.extend(manifest.hours(day).map(|hour| DocKey::Cell(CellKey { day, hour })))
            }
            Granularity::Bucket => {
                let span = manifest.day_window(day);
                for hour in manifest.hours(day) {
                    for b in (CellKey { day, hour }).buckets() {
                        if b.window().overlaps(&span) {
                            keys.push(DocKey::Bucket(b));
                        }
                    }
                }
            }
            Granularity::Subwindow => {
                for cam in &manifest.cameras {
                    keys.extend(manifest.slots(day).map(|slot| {
                        DocKey::SubWindow(SubWindowKey {
                            camera: cam.id.clone(),
                            day,
                            slot,
                        })
                    }));
                }
            }
        }
    }
    keys.sort();
    keys
}

/// Keys of `granularity` whose window overlaps `record`.
pub fn keys_for(record: &LaneRecord, granularity: Granularity) -> Vec<DocKey> {
    let w = record.window;
    let day = w.day();
    let off = CorpusManifest::day_offset(day);
    // windows never cross midnight (they lie inside a day span)
    let (s, e) = (w.start - off, w.end - off);
    let unit = match granularity {
        Granularity::Cell => HOUR,
        Granularity::Bucket => BUCKET,
        Granularity::Subwindow => SLOT,
    };
    let first = s / unit;
    let last = (e - 1) / unit;
    (first..=last)
        .map(|i| match granularity {
            Granularity::Cell => DocKey::Cell(CellKey {
                day,
                hour: i as u32,
            }),
            Granularity::Bucket => DocKey::Bucket(BucketKey {
                cell: CellKey {
                    day,
                    hour: (i / 4) as u32,
                },
                quarter: (i % 4) as u8,
            }),
            Granularity::Subwindow => DocKey::SubWindow(SubWindowKey {
                camera: record.camera.clone(),
                day,
                slot: i as u32,
            }),
        })
        .collect()
}

/// Assigns every record to every key it overlaps. All manifest keys are
/// present, including empty ones.
pub fn partition(
    records: &[LaneRecord],
    manifest: &CorpusManifest,
    granularity: Granularity,
) -> BTreeMap<DocKey, Vec<LaneRecord>> {
    let mut map: BTreeMap<DocKey, Vec<LaneRecord>> = enumerate_keys(manifest, granularity)
        .into_iter()
        .map(|k| (k, Vec::new()))
        .collect();
    for r in records {
        for key in keys_for(r, granularity) {
            map.entry(key).or_default().push(r.clone());
        }
    }
    map
}

/// A summary document for one temporal key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDocument {
    pub key: DocKey,
    pub text: String,
    pub source_counts: BTreeMap<Lane, usize>,
    /// Set when a model summary was requested but the extractive path was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gateway_fallback: bool,
}

impl CellDocument {
    pub fn id(&self) -> String {
        self.key.id()
    }
}

/// Extractive order: transcripts first, then captions, actions, objects, identities.
const SUMMARY_LANE_ORDER: [Lane; 5] = [
    Lane::Transcript,
    Lane::Caption,
    Lane::Action,
    Lane::Object,
    Lane::Identity,
];

/// Canonical rendering of the records, one line per distinct record text.
pub fn render_records(records: &[LaneRecord]) -> Vec<String> {
    let mut lines = Vec::new();
    let mut seen = BTreeSet::new();
    for lane in SUMMARY_LANE_ORDER {
        let mut of_lane: Vec<&LaneRecord> = records.iter().filter(|r| r.lane() == lane).collect();
        of_lane.sort_by(|a, b| (a.window.start, &a.camera).cmp(&(b.window.start, &b.camera)));
        for r in of_lane {
            let line = r.render();
            // the same utterance or caption seen by several cameras is kept once
            if seen.insert(line.clone()) {
                lines.push(line);
            }
        }
    }
    lines
}

/// Greedy prefix of `lines` whose joined length (with `\n`) fits in `budget` chars.
pub fn truncate_to_budget(lines: &[String], budget: usize) -> String {
    let mut out = String::new();
    let mut used = 0usize;
    for (i, line) in lines.iter().enumerate() {
        let cost = line.chars().count() + usize::from(i > 0);
        if used + cost > budget {
            break;
        }
        if i > 0 {
            out.push('\n');
        }
        out.push_str(line);
        used += cost;
    }
    out
}

fn count_sources(records: &[LaneRecord]) -> BTreeMap<Lane, usize> {
    let mut counts: BTreeMap<Lane, usize> = Lane::ALL.iter().map(|l| (*l, 0)).collect();
    for r in records {
        *counts.entry(r.lane()).or_default() += 1;
    }
    counts
}

/// Summarises the records of one key. With a gateway the text is a model
/// summary; without one, or when the model call fails, it is the extractive
/// rendering cut at a record boundary.
pub fn summarize_cell(
    key: DocKey,
    records: &[LaneRecord],
    budget: usize,
    gateway: Option<&Gateway>,
) -> Result<CellDocument> {
    if budget == 0 {
        return Err(Error::Validation("summary budget must be positive".into()));
    }
    let lines = render_records(records);
    let source_counts = count_sources(records);
    let extractive = || truncate_to_budget(&lines, budget);
    let Some(gateway) = gateway else {
        return Ok(CellDocument {
            key,
            text: extractive(),
            source_counts,
            gateway_fallback: false,
        });
    };
    if lines.is_empty() {
        return Ok(CellDocument {
            key,
            text: String::new(),
            source_counts,
            gateway_fallback: false,
        });
    }
    let req = ModelRequest::new(
        RoleTag::Summarise,
        "Summarise the timestamped observations of this time window. Keep names, \
         objects, places and quoted speech. Reply as JSON {\"summary\": string}.",
        ReplySchema::SummaryV1,
    )
    .with_part(UserPart::text(format!("window {key}")))
    .with_part(UserPart::text(lines.join("\n")))
    .with_budget((budget / 4).max(16));
    match gateway.send_role(&req) {
        Ok(reply) => {
            let summary = reply
                .parsed
                .as_ref()
                .and_then(|v| v.get("summary"))
                .and_then(|v| v.as_str())
                .unwrap_or_default();
            Ok(CellDocument {
                key,
                text: summary.chars().take(budget).collect(),
                source_counts,
                gateway_fallback: false,
            })
        }
        Err(e) => {
            log::warn!("summary for {key} fell back to extractive text: {e}");
            Ok(CellDocument {
                key,
                text: extractive(),
                source_counts,
                gateway_fallback: true,
            })
        }
    }
}

/// Builds documents for every key of `granularity`.
pub fn build_documents(
    records: &[LaneRecord],
    manifest: &CorpusManifest,
    granularity: Granularity,
    budget: usize,
    gateway: Option<&Gateway>,
) -> Result<Vec<CellDocument>> {
    partition(records, manifest, granularity)
        .into_iter()
        .map(|(key, recs)| summarize_cell(key, &recs, budget, gateway))
        .collect()
}

pub fn write_documents(path: impl AsRef<Path>, docs: &[CellDocument]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("documents serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<CellDocument>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Sub-windows around `anchor`: its own three slots widened by `span_before`
/// and `span_after` slots, clipped to the recorded day, crossed with `cameras`.
/// Sorted by `(slot, camera)`.
pub fn adjacent_subwindows(
    anchor: &BucketKey,
    cameras: &[String],
    span_before: u32,
    span_after: u32,
    manifest: &CorpusManifest,
) -> Vec<SubWindowKey> {
    let day = anchor.cell.day;
    let valid = manifest.slots(day);
    let first = anchor.first_slot() as i64 - span_before as i64;
    let last = (anchor.first_slot() + SLOTS_PER_BUCKET - 1) as i64 + span_after as i64;
    let first = first.max(valid.start as i64);
    let last = last.min(valid.end as i64 - 1);
    let cams: BTreeSet<&String> = cameras.iter().collect();
    let mut out = Vec::new();
    for slot in first..=last {
        for cam in &cams {
            out.push(SubWindowKey {
                camera: (*cam).clone(),
                day,
                slot: slot as u32,
            });
        }
    }
    out
}
