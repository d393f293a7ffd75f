//! Temporal multimodal knowledge graph: per-(camera, 5-minute) Observation
//! nodes, multi-view GlobalEvents, typed edges, the PRECEDES chain and
//! per-hour segment persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::{keys_for, CellKey, DocKey, Granularity, SubWindowKey, HOUR};
use crate::error::{Error, Result};
use crate::lane::{ActionTuple, CorpusManifest, LaneRecord, LaneStore, Payload, TimeWindow};
use crate::query::{Catalogs, Direction, ParsedQuery};
use crate::retrieval::RankedList;
use crate::text::{find_verbs, is_stopword, tokenize};

pub const DEFAULT_TAG_COUNT: usize = 8;

/// Evidence bundle for one (camera, 5-minute slot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: String,
    pub key: SubWindowKey,
    /// Union of the bundled records' windows.
    pub span: TimeWindow,
    pub transcript_texts: Vec<String>,
    pub caption_texts: Vec<String>,
    pub action_tuples: Vec<ActionTuple>,
    pub object_labels: Vec<String>,
    pub tags: BTreeSet<String>,
    pub persons: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub place: Option<String>,
}

impl Observation {
    pub fn id_for(key: &SubWindowKey) -> String {
        format!("obs:{key}")
    }

    /// Text indexed for retrieval.
    pub fn document_text(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        parts.extend(self.transcript_texts.iter().cloned());
        parts.extend(self.caption_texts.iter().cloned());
        for a in &self.action_tuples {
            parts.push(format!("{} {}", a.actor, a.verb));
        }
        parts.extend(self.object_labels.iter().cloned());
        if !self.persons.is_empty() {
            parts.push(self.persons.iter().cloned().collect::<Vec<_>>().join(" "));
        }
        if let Some(p) = &self.place {
            parts.push(p.clone());
        }
        parts.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEvent {
    pub id: String,
    pub members: BTreeSet<String>,
    pub span: TimeWindow,
    pub persons: BTreeSet<String>,
    pub place: Option<String>,
    pub verbs: BTreeSet<String>,
    pub tags: BTreeSet<String>,
    /// Mentions per catalog object across members (detections plus caption matches).
    pub object_mentions: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    Evidence,
    ParticipatesIn,
    LocatedAt,
    Involves,
    Precedes,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypedEdge {
    pub kind: EdgeKind,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Observation,
    Event,
    Person,
    Place,
    Object,
}

impl NodeKind {
    pub fn of(id: &str) -> Option<NodeKind> {
        let (prefix, _) = id.split_once(':')?;
        Some(match prefix {
            "obs" => NodeKind::Observation,
            "ev" => NodeKind::Event,
            "person" => NodeKind::Person,
            "place" => NodeKind::Place,
            "object" => NodeKind::Object,
            _ => return None,
        })
    }
}

pub fn person_node(id: &str) -> String {
    format!("person:{id}")
}

pub fn place_node(id: &str) -> String {
    format!("place:{id}")
}

pub fn object_node(id: &str) -> String {
    format!("object:{id}")
}

impl TypedEdge {
    pub fn new(kind: EdgeKind, from: impl Into<String>, to: impl Into<String>) -> Self {
        TypedEdge {
            kind,
            from: from.into(),
            to: to.into(),
        }
    }

    /// Whether both endpoints have the node kinds this edge kind requires.
    pub fn endpoints_ok(&self) -> bool {
        let (f, t) = (NodeKind::of(&self.from), NodeKind::of(&self.to));
        matches!(
            (self.kind, f, t),
            (EdgeKind::Evidence, Some(NodeKind::Observation), Some(NodeKind::Event))
                | (EdgeKind::ParticipatesIn, Some(NodeKind::Person), Some(NodeKind::Event))
                | (EdgeKind::LocatedAt, Some(NodeKind::Event), Some(NodeKind::Place))
                | (EdgeKind::Involves, Some(NodeKind::Event), Some(NodeKind::Object))
                | (EdgeKind::Precedes, Some(NodeKind::Event), Some(NodeKind::Event))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgConfig {
    pub tag_count: usize,
    pub person_jaccard: f64,
    pub tag_jaccard: f64,
    pub involves_floor: usize,
    /// Chain PRECEDES per place instead of globally.
    pub per_place_chains: bool,
    pub betas: PredicateBetas,
}

impl Default for KgConfig {
    fn default() -> Self {
        KgConfig {
            tag_count: DEFAULT_TAG_COUNT,
            person_jaccard: 0.5,
            tag_jaccard: 0.3,
            involves_floor: 2,
            per_place_chains: false,
            betas: PredicateBetas::default(),
        }
    }
}

fn most_frequent<'a>(items: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in items {
        *counts.entry(i).or_default() += 1;
    }
    // BTreeMap iteration is ascending, so the first maximum is the smallest name
    let mut best: Option<(&str, usize)> = None;
    for (k, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k.to_string())
}

/// Catalog phrases occurring in `text` (token-sequence match).
fn catalog_hits<'a>(text: &str, catalog: &'a [String]) -> Vec<&'a str> {
    let toks = tokenize(text);
    let mut hits = Vec::new();
    for entry in catalog {
        let phrase = tokenize(entry);
        if phrase.is_empty() {
            continue;
        }
        let n = toks.windows(phrase.len()).filter(|w| *w == phrase.as_slice()).count();
        hits.extend(std::iter::repeat_n(entry.as_str(), n));
    }
    hits
}

/// Top-`m` content tokens by frequency, ties broken alphabetically.
pub fn top_tags<'a>(texts: impl IntoIterator<Item = &'a str>, m: usize) -> BTreeSet<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for tok in tokenize(t) {
            if tok.chars().count() > 1 && !is_stopword(&tok) && !tok.chars().all(|c| c.is_ascii_digit()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(m).map(|(t, _)| t).collect()
}

/// One Observation per (camera, slot) that has at least one record.
pub fn build_observations(
    lanes: &LaneStore,
    manifest: &CorpusManifest,
    catalogs: &Catalogs,
    config: &KgConfig,
) -> Vec<Observation> {
    let mut grouped: BTreeMap<SubWindowKey, Vec<&LaneRecord>> = BTreeMap::new();
    for rec in lanes.all() {
        for key in keys_for(rec, Granularity::Subwindow) {
            if let DocKey::SubWindow(k) = key {
                grouped.entry(k).or_default().push(rec);
            }
        }
    }
    let verb_lexicon: BTreeSet<String> = catalogs.actions.iter().map(|a| a.to_lowercase()).collect();
    grouped
        .into_iter()
        .map(|(key, mut recs)| {
            recs.sort_by(|a, b| (a.window.start, a.lane()).cmp(&(b.window.start, b.lane())));
            let mut obs = Observation {
                id: Observation::id_for(&key),
                span: recs
                    .iter()
                    .map(|r| r.window)
                    .reduce(|a, b| a.union(&b))
                    .expect("groups are non-empty"),
                key,
                transcript_texts: Vec::new(),
                caption_texts: Vec::new(),
                action_tuples: Vec::new(),
                object_labels: Vec::new(),
                tags: BTreeSet::new(),
                persons: BTreeSet::new(),
                verbs: BTreeSet::new(),
                place: None,
            };
            for r in &recs {
                match &r.payload {
                    Payload::Transcript(t) => obs.transcript_texts.push(t.text.clone()),
                    Payload::Caption(c) => obs.caption_texts.push(c.text.clone()),
                    Payload::Object(o) => obs.object_labels.push(o.label.clone()),
                    Payload::Identity(i) => {
                        if let Some(p) = &i.person {
                            obs.persons.insert(p.clone());
                        }
                    }
                    Payload::Action(_) => {
                        if let Some(t) = ActionTuple::from_record(r) {
                            obs.verbs.insert(t.verb.to_lowercase());
                            obs.action_tuples.push(t);
                        }
                    }
                }
            }
            // the wearer of an egocentric camera is present in its own footage
            if let Some(w) = manifest.camera(&obs.key.camera).and_then(|c| c.wearer.clone()) {
                obs.persons.insert(w);
            }
            obs.persons.retain(|p| manifest.person(p).is_some());
            for c in &obs.caption_texts {
                obs.verbs.extend(find_verbs(&tokenize(c), &verb_lexicon));
            }
            obs.tags = top_tags(
                obs.transcript_texts
                    .iter()
                    .chain(&obs.caption_texts)
                    .chain(&obs.object_labels)
                    .map(String::as_str),
                config.tag_count,
            );
            let mut place_mentions: Vec<&str> = Vec::new();
            for c in &obs.caption_texts {
                place_mentions.extend(catalog_hits(c, &catalogs.places));
            }
            for o in &obs.object_labels {
                place_mentions.extend(catalog_hits(o, &catalogs.places));
            }
            obs.place = most_frequent(place_mentions);
            obs
        })
        .collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Pairwise merge relation between two observations.
pub fn should_merge(a: &Observation, b: &Observation, config: &KgConfig) -> bool {
    a.key.day == b.key.day
        && a.key.slot == b.key.slot
        && a.place == b.place
        && jaccard(&a.persons, &b.persons) >= config.person_jaccard
        && (a.verbs.intersection(&b.verbs).next().is_some() || jaccard(&a.tags, &b.tags) >= config.tag_jaccard)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes the root so results do not depend on call order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn make_event(members: &[&Observation], catalogs: &Catalogs) -> GlobalEvent {
    let ids: BTreeSet<String> = members.iter().map(|o| o.id.clone()).collect();
    let first = ids.iter().next().expect("events have members");
    let mut object_mentions: BTreeMap<String, usize> = BTreeMap::new();
    let known: BTreeSet<String> = catalogs.objects.iter().map(|o| o.to_lowercase()).collect();
    for o in members {
        for label in &o.object_labels {
            let label = label.to_lowercase();
            if known.is_empty() || known.contains(&label) {
                *object_mentions.entry(label).or_default() += 1;
            }
        }
        for c in &o.caption_texts {
            for hit in catalog_hits(c, &catalogs.objects) {
                *object_mentions.entry(hit.to_lowercase()).or_default() += 1;
            }
        }
    }
    GlobalEvent {
        id: format!("ev:{}", first.trim_start_matches("obs:")),
        span: members
            .iter()
            .map(|o| o.span)
            .reduce(|a, b| a.union(&b))
            .expect("events have members"),
        persons: members.iter().flat_map(|o| o.persons.iter().cloned()).collect(),
        place: most_frequent(members.iter().filter_map(|o| o.place.as_deref())),
        verbs: members.iter().flat_map(|o| o.verbs.iter().cloned()).collect(),
        tags: members.iter().flat_map(|o| o.tags.iter().cloned()).collect(),
        object_mentions,
        members: ids,
    }
}

/// Connected components of the merge relation, one event per component and
/// one EVIDENCE edge per member. Output is sorted by event id.
pub fn aggregate_global_events(
    observations: &[Observation],
    catalogs: &Catalogs,
    config: &KgConfig,
) -> (Vec<GlobalEvent>, Vec<TypedEdge>) {
    let mut sorted: Vec<&Observation> = observations.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.dedup_by(|a, b| a.id == b.id);
    let mut by_slot: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, o) in sorted.iter().enumerate() {
        by_slot.entry((o.key.day, o.key.slot)).or_default().push(i);
    }
    let mut uf = UnionFind::new(sorted.len());
    for group in by_slot.values() {
        for (x, &i) in group.iter().enumerate() {
            for &j in &group[x + 1..] {
                if should_merge(sorted[i], sorted[j], config) {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<&Observation>> = BTreeMap::new();
    for i in 0..sorted.len() {
        let root = uf.find(i);
        comps.entry(root).or_default().push(sorted[i]);
    }
    let mut events: Vec<GlobalEvent> = comps.values().map(|m| make_event(m, catalogs)).collect();
    events.sort_by(|a, b| a.id.cmp(&b.id));
    let mut evidence = Vec::new();
    for e in &events {
        for m in &e.members {
            evidence.push(TypedEdge::new(EdgeKind::Evidence, m.clone(), e.id.clone()));
        }
    }
    (events, evidence)
}

/// PARTICIPATES_IN, LOCATED_AT, INVOLVES and PRECEDES edges.
pub fn link_edges(events: &[GlobalEvent], config: &KgConfig) -> Vec<TypedEdge> {
    let mut edges = Vec::new();
    for e in events {
        for p in &e.persons {
            edges.push(TypedEdge::new(EdgeKind::ParticipatesIn, person_node(p), e.id.clone()));
        }
        if let Some(place) = &e.place {
            edges.push(TypedEdge::new(EdgeKind::LocatedAt, e.id.clone(), place_node(place)));
        }
        for (obj, n) in &e.object_mentions {
            if *n >= config.involves_floor {
                edges.push(TypedEdge::new(EdgeKind::Involves, e.id.clone(), object_node(obj)));
            }
        }
    }
    let mut chains: BTreeMap<Option<&str>, Vec<&GlobalEvent>> = BTreeMap::new();
    for e in events {
        let key = if config.per_place_chains { e.place.as_deref() } else { None };
        chains.entry(key).or_default().push(e);
    }
    for chain in chains.values_mut() {
        chain.sort_by(|a, b| (a.span.start, &a.id).cmp(&(b.span.start, &b.id)));
        for w in chain.windows(2) {
            edges.push(TypedEdge::new(EdgeKind::Precedes, w[0].id.clone(), w[1].id.clone()));
        }
    }
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredicateBetas {
    pub person: f64,
    pub place: f64,
    pub object: f64,
}

impl Default for PredicateBetas {
    fn default() -> Self {
        PredicateBetas {
            person: 0.3,
            place: 0.2,
            object: 0.2,
        }
    }
}

/// The whole graph with lookup tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    pub observations: BTreeMap<String, Observation>,
    pub events: BTreeMap<String, GlobalEvent>,
    pub edges: Vec<TypedEdge>,
    event_of: HashMap<String, String>,
    next: HashMap<String, String>,
    prev: HashMap<String, String>,
}

impl KnowledgeGraph {
    pub fn from_parts(observations: Vec<Observation>, events: Vec<GlobalEvent>, mut edges: Vec<TypedEdge>) -> Self {
        edges.sort();
        edges.dedup();
        let mut g = KnowledgeGraph {
            observations: observations.into_iter().map(|o| (o.id.clone(), o)).collect(),
            events: events.into_iter().map(|e| (e.id.clone(), e)).collect(),
            edges,
            ..Default::default()
        };
        for e in &g.edges {
            match e.kind {
                EdgeKind::Evidence => {
                    g.event_of.insert(e.from.clone(), e.to.clone());
                }
                EdgeKind::Precedes => {
                    g.next.insert(e.from.clone(), e.to.clone());
                    g.prev.insert(e.to.clone(), e.from.clone());
                }
                _ => {}
            }
        }
        g
    }

    pub fn build(lanes: &LaneStore, manifest: &CorpusManifest, catalogs: &Catalogs, config: &KgConfig) -> Self {
        let obs = build_observations(lanes, manifest, catalogs, config);
        let (events, mut edges) = aggregate_global_events(&obs, catalogs, config);
        edges.extend(link_edges(&events, config));
        KnowledgeGraph::from_parts(obs, events, edges)
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn event_of(&self, observation_id: &str) -> Option<&GlobalEvent> {
        self.event_of.get(observation_id).and_then(|e| self.events.get(e))
    }

    pub fn has_edge(&self, kind: EdgeKind, from: &str, to: &str) -> bool {
        self.edges
            .binary_search(&TypedEdge::new(kind, from, to))
            .is_ok()
    }

    /// Follows PRECEDES up to `steps` hops; hop 1 is the immediate neighbour.
    pub fn traverse_precedes(&self, event_id: &str, direction: Direction, steps: usize) -> Result<Vec<String>> {
        if !self.events.contains_key(event_id) {
            return Err(Error::NotFound(format!("event {event_id}")));
        }
        let step_map = match direction {
            Direction::Before => &self.prev,
            Direction::After => &self.next,
        };
        let mut out = Vec::new();
        let mut cur = event_id.to_string();
        for _ in 0..steps {
            match step_map.get(&cur) {
                Some(n) => {
                    out.push(n.clone());
                    cur = n.clone();
                }
                None => break,
            }
        }
        Ok(out)
    }

    /// Checks node-kind constraints, the partition law and PRECEDES ordering.
    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if !e.endpoints_ok() {
                return Err(Error::Validation(format!("edge {e:?} has wrong endpoint kinds")));
            }
            if e.kind == EdgeKind::Precedes {
                let (a, b) = (&self.events[&e.from], &self.events[&e.to]);
                if (a.span.start, &a.id) >= (b.span.start, &b.id) {
                    return Err(Error::Validation(format!("PRECEDES {} -> {} is out of order", a.id, b.id)));
                }
            }
        }
        for id in self.observations.keys() {
            let n = self.events.values().filter(|e| e.members.contains(id)).count();
            if n != 1 {
                return Err(Error::Validation(format!("observation {id} belongs to {n} events")));
            }
        }
        Ok(())
    }

    /// Splits the graph into per-hour segments plus the PRECEDES edges that
    /// cross segment boundaries.
    pub fn segments(&self) -> (Vec<GraphSegment>, Vec<TypedEdge>) {
        let seg_of_event: HashMap<&str, CellKey> = self
            .events
            .values()
            .map(|e| (e.id.as_str(), segment_key(&e.span)))
            .collect();
        let mut segs: BTreeMap<CellKey, GraphSegment> = BTreeMap::new();
        for e in self.events.values() {
            let k = seg_of_event[e.id.as_str()];
            let s = segs.entry(k).or_insert_with(|| GraphSegment::empty(k));
            s.events.push(e.clone());
            for m in &e.members {
                s.observations.push(self.observations[m].clone());
            }
        }
        let mut cross = Vec::new();
        for edge in &self.edges {
            let owner = match edge.kind {
                EdgeKind::Evidence | EdgeKind::ParticipatesIn => edge.to.as_str(),
                _ => edge.from.as_str(),
            };
            let k = seg_of_event[owner];
            if edge.kind == EdgeKind::Precedes && seg_of_event[edge.to.as_str()] != k {
                cross.push(edge.clone());
                continue;
            }
            segs.entry(k).or_insert_with(|| GraphSegment::empty(k)).edges.push(edge.clone());
        }
        (segs.into_values().collect(), cross)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (segs, cross) = self.segments();
        for s in &segs {
            persist_segment(dir, s)?;
        }
        let path = dir.join(STITCH_FILE);
        let body = serde_json::to_string(&cross).expect("edges serialize");
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    /// Loads every segment in `dir` and the stitched PRECEDES edges.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut keys = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(stem) = name.strip_suffix(".segment.json") {
                if let Some((d, h)) = stem.split_once('_') {
                    if let (Ok(day), Ok(hour)) = (d.parse(), h.parse()) {
                        keys.push(CellKey { day, hour });
                    }
                }
            }
        }
        keys.sort();
        let mut obs = Vec::new();
        let mut events = Vec::new();
        let mut edges = Vec::new();
        for k in keys {
            let s = load_segment(dir, k)?;
            obs.extend(s.observations);
            events.extend(s.events);
            edges.extend(s.edges);
        }
        let stitch = dir.join(STITCH_FILE);
        if stitch.exists() {
            let raw = fs::read_to_string(&stitch).map_err(|e| Error::io(&stitch, e))?;
            let cross: Vec<TypedEdge> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
            edges.extend(cross);
        }
        Ok(KnowledgeGraph::from_parts(obs, events, edges))
    }
}

pub const STITCH_FILE: &str = "precedes.stitch.json";

/// Segment key of an event: the hour its span starts in.
pub fn segment_key(span: &TimeWindow) -> CellKey {
    let day = span.day();
    let sod = span.start - CorpusManifest::day_offset(day);
    CellKey {
        day,
        hour: (sod / HOUR) as u32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSegment {
    pub day: u32,
    pub hour: u32,
    pub observations: Vec<Observation>,
    pub events: Vec<GlobalEvent>,
    pub edges: Vec<TypedEdge>,
}

impl GraphSegment {
    fn empty(k: CellKey) -> Self {
        GraphSegment {
            day: k.day,
            hour: k.hour,
            observations: Vec::new(),
            events: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Every edge endpoint is a node of this segment or a catalog node.
    pub fn is_self_contained(&self) -> bool {
        let local: BTreeSet<&str> = self
            .observations
            .iter()
            .map(|o| o.id.as_str())
            .chain(self.events.iter().map(|e| e.id.as_str()))
            .collect();
        let resolvable = |id: &str| match NodeKind::of(id) {
            Some(NodeKind::Person | NodeKind::Place | NodeKind::Object) => true,
            Some(_) => local.contains(id),
            None => false,
        };
        self.edges.iter().all(|e| resolvable(&e.from) && resolvable(&e.to))
    }
}

pub fn segment_path(dir: &Path, key: CellKey) -> PathBuf {
    dir.join(format!("{}_{}.segment.json", key.day, key.hour))
}

#[derive(Serialize, Deserialize)]
struct ChecksumLine {
    checksum: String,
}

/// Writes the segment body as one JSON line followed by a checksum line.
pub fn persist_segment(dir: impl AsRef<Path>, segment: &GraphSegment) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if !segment.is_self_contained() {
        return Err(Error::Validation(format!(
            "segment {}_{} references nodes outside itself",
            segment.day, segment.hour
        )));
    }
    let path = segment_path(
        dir,
        CellKey {
            day: segment.day,
            hour: segment.hour,
        },
    );
    let body = serde_json::to_string(segment).expect("segments serialize");
    let checksum = hex::encode(Sha256::digest(body.as_bytes()));
    let tail = serde_json::to_string(&ChecksumLine { checksum }).expect("checksum serializes");
    fs::write(&path, format!("{body}\n{tail}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_segment(dir: impl AsRef<Path>, key: CellKey) -> Result<GraphSegment> {
    let path = segment_path(dir.as_ref(), key);
    if !path.exists() {
        return Err(Error::NotFound(format!("segment {}", path.display())));
    }
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = || Error::CorruptSegment(path.display().to_string());
    let text = String::from_utf8(raw).map_err(|_| corrupt())?;
    let lines: Vec<&str> = text.split('\n').collect();
    let [body, tail, ""] = lines.as_slice() else {
        return Err(corrupt());
    };
    let stored: ChecksumLine = serde_json::from_str(tail).map_err(|_| corrupt())?;
    if hex::encode(Sha256::digest(body.as_bytes())) != stored.checksum {
        return Err(corrupt());
    }
    let seg: GraphSegment = serde_json::from_str(body).map_err(|_| corrupt())?;
    if seg.day != key.day || seg.hour != key.hour {
        return Err(corrupt());
    }
    Ok(seg)
}

/// Adds a bonus per satisfied constraint type (person, place, object) via
/// the observation's event, then re-sorts.
pub fn rerank_with_predicates(
    base: &RankedList,
    constraints: &ParsedQuery,
    graph: &KnowledgeGraph,
    betas: &PredicateBetas,
) -> RankedList {
    RankedList::from_scores(base.entries.iter().map(|(id, score)| {
        (id.clone(), score + predicate_bonus(id, constraints, graph, betas))
    }))
}

pub fn predicate_bonus(
    observation_id: &str,
    constraints: &ParsedQuery,
    graph: &KnowledgeGraph,
    betas: &PredicateBetas,
) -> f64 {
    let Some(ev) = graph.event_of(observation_id) else {
        return 0.0;
    };
    let mut bonus = 0.0;
    if constraints
        .persons
        .iter()
        .any(|p| graph.has_edge(EdgeKind::ParticipatesIn, &person_node(p), &ev.id))
    {
        bonus += betas.person;
    }
    if constraints
        .places
        .iter()
        .any(|p| graph.has_edge(EdgeKind::LocatedAt, &ev.id, &place_node(p)))
    {
        bonus += betas.place;
    }
    if constraints
        .objects
        .iter()
        .any(|o| graph.has_edge(EdgeKind::Involves, &ev.id, &object_node(o)))
    {
        bonus += betas.object;
    }
    bonus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::Intent;

    pub(crate) fn obs(cam: &str, slot: u32, persons: &[&str], place: Option<&str>, verbs: &[&str], tags: &[&str]) -> Observation {
        let key = SubWindowKey {
            camera: cam.into(),
            day: 1,
            slot,
        };
        let w = key.window();
        Observation {
            id: Observation::id_for(&key),
            key,
            span: TimeWindow {
                start: w.start,
                end: w.start + 100,
            },
            transcript_texts: vec![],
            caption_texts: vec![],
            action_tuples: vec![],
            object_labels: vec![],
            tags: tags.iter().map(|s| s.to_string()).collect(),
            persons: persons.iter().map(|s| s.to_string()).collect(),
            verbs: verbs.iter().map(|s| s.to_string()).collect(),
            place: place.map(str::to_string),
        }
    }

    fn cfg() -> KgConfig {
        KgConfig::default()
    }

    #[test]
    fn identical_pair_merges() {
        let a = obs("ego1", 100, &["alice"], Some("kitchen"), &["chop"], &[]);
        let b = obs("exo1", 100, &["alice"], Some("kitchen"), &["chop"], &[]);
        let (ev, edges) = aggregate_global_events(&[a, b], &Catalogs::default(), &cfg());
        assert_eq!(ev.len(), 1);
        assert_eq!(edges.len(), 2);
        assert!(edges.iter().all(|e| e.kind == EdgeKind::Evidence));
    }

    #[test]
    fn different_slots_never_merge() {
        let a = obs("ego1", 100, &["alice"], Some("kitchen"), &["chop"], &[]);
        let b = obs("exo1", 101, &["alice"], Some("kitchen"), &["chop"], &[]);
        assert!(!should_merge(&a, &b, &cfg()));
        let (ev, _) = aggregate_global_events(&[a, b], &Catalogs::default(), &cfg());
        assert_eq!(ev.len(), 2);
    }

    #[test]
    fn closure_joins_chain() {
        // a~b via verbs, b~c via tags, a and c share neither
        let a = obs("c1", 5, &["x"], Some("p"), &["chop"], &["t1"]);
        let b = obs("c2", 5, &["x"], Some("p"), &["chop"], &["t2", "t3"]);
        let c = obs("c3", 5, &["x"], Some("p"), &["wash"], &["t2", "t3"]);
        assert!(!should_merge(&a, &c, &cfg()));
        let (ev, _) = aggregate_global_events(&[c, a, b], &Catalogs::default(), &cfg());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].members.len(), 3);
    }

    fn chain_graph() -> KnowledgeGraph {
        let os = vec![
            obs("c", 0, &["alice"], Some("kitchen"), &[], &[]),
            obs("c", 1, &["bob"], Some("hall"), &[], &[]),
            obs("c", 2, &["carol"], None, &[], &[]),
        ];
        let (events, mut edges) = aggregate_global_events(&os, &Catalogs::default(), &cfg());
        edges.extend(link_edges(&events, &cfg()));
        KnowledgeGraph::from_parts(os, events, edges)
    }

    #[test]
    fn precedes_chain_and_traversal() {
        let g = chain_graph();
        let pre: Vec<_> = g.edges.iter().filter(|e| e.kind == EdgeKind::Precedes).collect();
        assert_eq!(pre.len(), 2);
        let ids: Vec<String> = g.events.keys().cloned().collect();
        let (e1, e2, e3) = (&ids[0], &ids[1], &ids[2]);
        assert!(g.traverse_precedes(e1, Direction::Before, 1).unwrap().is_empty());
        assert_eq!(g.traverse_precedes(e2, Direction::After, 1).unwrap(), vec![e3.clone()]);
        assert_eq!(g.traverse_precedes(e3, Direction::Before, 2).unwrap(), vec![e2.clone(), e1.clone()]);
        assert!(g.traverse_precedes("ev:none", Direction::After, 1).is_err());
        g.validate().unwrap();
    }

    #[test]
    fn single_event_no_precedes() {
        let os = vec![obs("c", 0, &["alice"], None, &[], &[])];
        let (events, _) = aggregate_global_events(&os, &Catalogs::default(), &cfg());
        let edges = link_edges(&events, &cfg());
        assert!(edges.iter().all(|e| e.kind != EdgeKind::Precedes));
        assert_eq!(edges.iter().filter(|e| e.kind == EdgeKind::ParticipatesIn).count(), 1);
    }

    #[test]
    fn predicate_bonus_breaks_tie() {
        let g = chain_graph();
        let base = RankedList::from_scores([("obs:c@d1s000".to_string(), 0.5), ("obs:c@d1s001".to_string(), 0.5)]);
        let mut q = ParsedQuery {
            day: None,
            time_range: None,
            persons: BTreeSet::new(),
            places: BTreeSet::new(),
            objects: BTreeSet::new(),
            actions: BTreeSet::new(),
            intent: Intent::Who,
            direction: None,
            raw: String::new(),
        };
        let betas = PredicateBetas::default();
        assert_eq!(rerank_with_predicates(&base, &q, &g, &betas), base);
        q.persons.insert("bob".into());
        let r = rerank_with_predicates(&base, &q, &g, &betas);
        assert_eq!(r.entries[0].0, "obs:c@d1s001");
        assert!((r.entries[0].1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn segment_round_trip_and_corruption() {
        let g = chain_graph();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let back = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(back, g);
        let key = CellKey { day: 1, hour: 0 };
        assert!(matches!(load_segment(dir.path(), CellKey { day: 9, hour: 0 }), Err(Error::NotFound(_))));
        let path = segment_path(dir.path(), key);
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_segment(dir.path(), key), Err(Error::CorruptSegment(_))));
    }

    #[test]
    fn tags_top_m() {
        let t = top_tags(["mug mug mug kettle kettle the the the the board"], 2);
        assert_eq!(t, ["kettle", "mug"].iter().map(|s| s.to_string()).collect());
    }
}
