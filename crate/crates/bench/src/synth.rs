//! Seeded synthetic household recordings with a ground-truth script.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vidqa_core::cells::{BucketKey, SLOT};
use vidqa_core::engine::Corpus;
use vidqa_core::lane::{
    ActionBody, CameraInfo, CameraKind, CaptionBody, CaptionKind, CorpusManifest, DaySpan, IdentityBody, LaneRecord,
    LaneStore, ObjectBody, Payload, Person, SpeakerCandidate, TimeWindow, TranscriptBody,
};
use vidqa_core::query::{Catalogs, Lexicons};

use crate::BenchError;

pub const PERSONS: [(&str, &str); 8] = [
    ("alice", "Alice"),
    ("bob", "Bob"),
    ("carol", "Carol"),
    ("dave", "Dave"),
    ("erin", "Erin"),
    ("frank", "Frank"),
    ("grace", "Grace"),
    ("heidi", "Heidi"),
];

/// The first entries are watched by the fixed cameras, in order.
pub const PLACES: [&str; 4] = ["kitchen", "living room", "garden", "study"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verb {
    pub base: &'static str,
    pub third: &'static str,
    pub past: &'static str,
    pub gerund: &'static str,
}

const fn verb(base: &'static str, third: &'static str, past: &'static str, gerund: &'static str) -> Verb {
    Verb {
        base,
        third,
        past,
        gerund,
    }
}

pub const VERBS: [Verb; 16] = [
    verb("wash", "washes", "washed", "washing"),
    verb("dry", "dries", "dried", "drying"),
    verb("repair", "repairs", "repaired", "repairing"),
    verb("paint", "paints", "painted", "painting"),
    verb("fold", "folds", "folded", "folding"),
    verb("sort", "sorts", "sorted", "sorting"),
    verb("polish", "polishes", "polished", "polishing"),
    verb("wrap", "wraps", "wrapped", "wrapping"),
    verb("carry", "carries", "carried", "carrying"),
    verb("inspect", "inspects", "inspected", "inspecting"),
    verb("measure", "measures", "measured", "measuring"),
    verb("clean", "cleans", "cleaned", "cleaning"),
    verb("stack", "stacks", "stacked", "stacking"),
    verb("rinse", "rinses", "rinsed", "rinsing"),
    verb("sketch", "sketches", "sketched", "sketching"),
    verb("arrange", "arranges", "arranged", "arranging"),
];

const ADJECTIVES: [&str; 20] = [
    "copper", "striped", "wooden", "silver", "cracked", "woven", "velvet", "painted", "brass", "ceramic", "dusty",
    "chipped", "tartan", "enamel", "glossy", "rusty", "marble", "pewter", "quilted", "lacquered",
];

const NOUNS: [&str; 18] = [
    "kettle", "lamp", "scarf", "vase", "jar", "bowl", "book", "basket", "clock", "chair", "plant", "bottle", "tray",
    "blanket", "teapot", "radio", "box", "frame",
];

/// Objects whose multiplicity count questions ask about, with plurals.
pub const COUNTABLES: [(&str, &str); 6] = [
    ("mug", "mugs"),
    ("coin", "coins"),
    ("pencil", "pencils"),
    ("apple", "apples"),
    ("spoon", "spoons"),
    ("candle", "candles"),
];

const REGIONS: [&str; 6] = ["table-left", "table-right", "shelf-top", "counter", "floor", "windowsill"];

const UTTERANCES: [&str; 6] = [
    "I think the {} needs another look before lunch",
    "Could you pass me the {} when you are finished",
    "We should move the {} closer to the window",
    "Careful because the {} is heavier than it looks",
    "Let us leave the {} here until tomorrow morning",
    "My grandmother used to keep a {} just like this one",
];

const REPLIES: [&str; 4] = [
    "Sure, just give me a minute",
    "That sounds fine to me",
    "I can help with that",
    "Good idea, go ahead",
];

const SIGN_FIRST: [&str; 8] = ["Fresh", "Quiet", "Wet", "Private", "Staff", "Free", "Open", "Closed"];
const SIGN_SECOND: [&str; 8] = ["paint", "zone", "hours", "samples", "entrance", "parking", "floor", "room"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub days: u32,
    pub hours_per_day: u32,
    pub start_hour: u32,
    pub persons: usize,
    pub ego_cameras: usize,
    pub exo_cameras: usize,
    /// Probability that a 5-minute slot holds happenings.
    pub density: f64,
    /// Probability that a happening shows on-screen text.
    pub ocr_rate: f64,
    pub embedding_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            days: 4,
            hours_per_day: 2,
            start_hour: 8,
            persons: 6,
            ego_cameras: 4,
            exo_cameras: 2,
            density: 1.0,
            ocr_rate: 0.35,
            embedding_dim: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.days == 0 || self.hours_per_day == 0 {
            return fail("days and hours_per_day must be positive");
        }
        if self.start_hour + self.hours_per_day > 24 {
            return fail("recording must end within the day");
        }
        if self.persons < 2 || self.persons > PERSONS.len() {
            return fail("persons must be between 2 and 8");
        }
        if self.ego_cameras == 0 || self.ego_cameras > self.persons {
            return fail("need at least one worn camera and no more than one per person");
        }
        if self.exo_cameras > 2 {
            return fail("at most two fixed cameras");
        }
        if !(0.0..=1.0).contains(&self.density) || !(0.0..=1.0).contains(&self.ocr_rate) {
            return fail("density and ocr_rate must lie in [0, 1]");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

/// One scripted happening. Happenings never overlap in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Happening {
    pub id: usize,
    pub day: u32,
    pub window: TimeWindow,
    pub place: String,
    /// The actor comes first.
    pub persons: Vec<String>,
    /// Base form; one of [`VERBS`].
    pub verb: String,
    /// Unique adjective-noun phrase naming the handled object.
    pub anchor: String,
    pub anchor_noun: String,
    pub count_object: String,
    pub count: u32,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_screen_text: Option<String>,
    /// Cameras that record this happening.
    pub cameras: Vec<String>,
}

impl Happening {
    pub fn verb(&self) -> Verb {
        VERBS
            .iter()
            .copied()
            .find(|v| v.base == self.verb)
            .unwrap_or(VERBS[0])
    }

    pub fn actor(&self) -> &str {
        &self.persons[0]
    }

    pub fn bucket(&self) -> BucketKey {
        BucketKey::containing(self.window.start)
    }

    pub fn seen_by(&self, camera: &str) -> bool {
        self.cameras.iter().any(|c| c == camera)
    }

    /// True when `camera` over `window` shows this happening.
    pub fn visible_in(&self, camera: &str, window: &TimeWindow) -> bool {
        self.seen_by(camera) && self.window.overlaps(window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScript {
    pub seed: u64,
    pub config: SynthConfig,
    /// Chronological.
    pub happenings: Vec<Happening>,
}

impl GroundTruthScript {
    /// Camera to the happenings it records.
    pub fn visibility(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for h in &self.happenings {
            for c in &h.cameras {
                map.entry(c.clone()).or_default().push(h.id);
            }
        }
        map
    }

    /// Happenings a lane record could have come from.
    pub fn sources_of(&self, rec: &LaneRecord) -> Vec<usize> {
        self.happenings
            .iter()
            .filter(|h| h.seen_by(&rec.camera) && h.window.contains(&rec.window))
            .map(|h| h.id)
            .collect()
    }

    pub fn happening(&self, id: usize) -> &Happening {
        &self.happenings[id]
    }

    pub fn name_of(&self, person: &str) -> String {
        PERSONS
            .iter()
            .find(|(id, _)| *id == person)
            .map_or_else(|| person.to_string(), |(_, n)| n.to_string())
    }

    /// "Alice and Bob" style list of display names.
    pub fn names(&self, persons: &[String]) -> String {
        let names: Vec<String> = persons.iter().map(|p| self.name_of(p)).collect();
        match names.as_slice() {
            [] => String::new(),
            [one] => one.clone(),
            [init @ .., last] => format!("{} and {last}", init.join(", ")),
        }
    }

    /// Short past-tense description used as an answer choice.
    pub fn descriptor(&self, h: &Happening) -> String {
        format!("{} {} the {}", self.name_of(h.actor()), h.verb().past, h.anchor)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect();
    normalise(v)
}

fn normalise(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn jitter(rng: &mut ChaCha8Rng, centroid: &[f32]) -> Vec<f32> {
    normalise(centroid.iter().map(|x| x + (rng.gen::<f32>() - 0.5) * 0.1).collect())
}

pub fn manifest_for(config: &SynthConfig) -> CorpusManifest {
    let roster: Vec<Person> = PERSONS[..config.persons]
        .iter()
        .map(|(id, name)| Person {
            id: id.to_string(),
            name: name.to_string(),
        })
        .collect();
    let mut cameras: Vec<CameraInfo> = (0..config.ego_cameras)
        .map(|i| CameraInfo {
            id: format!("ego{}", i + 1),
            kind: CameraKind::Ego,
            wearer: Some(roster[i].id.clone()),
        })
        .collect();
    cameras.extend((0..config.exo_cameras).map(|i| CameraInfo {
        id: format!("exo{}", i + 1),
        kind: CameraKind::Exo,
        wearer: None,
    }));
    CorpusManifest {
        days: config.days,
        epoch: 0,
        day_span: DaySpan {
            start: config.start_hour as u64 * 3600,
            end: (config.start_hour + config.hours_per_day) as u64 * 3600,
        },
        day_spans: Vec::new(),
        cameras,
        roster,
        embedding_dim: config.embedding_dim,
    }
}

pub fn catalogs_for(manifest: &CorpusManifest) -> Catalogs {
    let mut objects: Vec<String> = NOUNS.iter().map(|s| s.to_string()).collect();
    objects.extend(COUNTABLES.iter().map(|(s, _)| s.to_string()));
    Catalogs {
        persons: manifest.roster.clone(),
        places: PLACES.iter().map(|s| s.to_string()).collect(),
        objects,
        actions: VERBS.iter().map(|v| v.base.to_string()).collect(),
    }
}

/// Splits the roster into `k` groups so that each group holds a camera wearer.
fn groups(rng: &mut ChaCha8Rng, persons: &[String], wearers: usize, k: usize) -> Vec<Vec<String>> {
    let mut worn: Vec<String> = persons[..wearers].to_vec();
    let mut rest: Vec<String> = persons[wearers..].to_vec();
    worn.shuffle(rng);
    rest.shuffle(rng);
    let mut out = vec![Vec::new(); k];
    for (i, p) in worn.into_iter().chain(rest).enumerate() {
        out[i % k].push(p);
    }
    for g in &mut out {
        g.shuffle(rng);
    }
    out
}

/// Builds the script and the lane records it implies.
pub fn generate_corpus(seed: u64, config: &SynthConfig) -> Result<(Corpus, GroundTruthScript), BenchError> {
    config.validate()?;
    let manifest = manifest_for(config);
    manifest.validate()?;
    let catalogs = catalogs_for(&manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let person_ids: Vec<String> = manifest.roster.iter().map(|p| p.id.clone()).collect();
    let dim = config.embedding_dim;
    let centroids: BTreeMap<String, (Vec<f32>, Vec<f32>)> = person_ids
        .iter()
        .map(|p| (p.clone(), (unit_vector(&mut rng, dim), unit_vector(&mut rng, dim))))
        .collect();

    let mut anchors: Vec<(usize, usize)> = (0..ADJECTIVES.len())
        .flat_map(|a| (0..NOUNS.len()).map(move |n| (a, n)))
        .collect();
    anchors.shuffle(&mut rng);
    let mut anchors = anchors.into_iter();
    let mut signs: BTreeSet<String> = BTreeSet::new();

    let mut happenings: Vec<Happening> = Vec::new();
    for day in manifest.days() {
        let day_off = CorpusManifest::day_offset(day);
        for slot in manifest.slots(day) {
            if !rng.gen_bool(config.density) {
                continue;
            }
            let k = if config.ego_cameras >= 3 && person_ids.len() >= 6 && rng.gen_bool(0.5) {
                3
            } else {
                2
            }
            .min(config.ego_cameras)
            .max(1);
            let mut gs = groups(&mut rng, &person_ids, config.ego_cameras, k);
            // only the first two groups can stand where the fixed cameras look
            let mut places: Vec<&str> = PLACES[..k.min(2)].to_vec();
            if k == 3 {
                places.push(PLACES[2 + rng.gen_range(0..2)]);
            }
            let layout: &[(u64, u64)] = if k == 3 {
                &[(5, 95), (105, 195), (205, 295)]
            } else {
                &[(10, 140), (160, 290)]
            };
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let slot_start = day_off + slot as u64 * SLOT;
            let mut in_slot = Vec::new();
            for (pos, &gi) in order.iter().enumerate() {
                let (a, b) = layout[pos];
                let shift = rng.gen_range(0..4u64);
                let window = TimeWindow {
                    start: slot_start + a + shift,
                    end: slot_start + b,
                };
                let persons = std::mem::take(&mut gs[gi]);
                let place = places[gi].to_string();
                let (ai, ni) = anchors.next().ok_or_else(|| BenchError::Config("too many happenings for the anchor vocabulary".into()))?;
                let anchor = format!("{} {}", ADJECTIVES[ai], NOUNS[ni]);
                let v = VERBS[rng.gen_range(0..VERBS.len())];
                let (count_object, _) = COUNTABLES[rng.gen_range(0..COUNTABLES.len())];
                let mut utterances = vec![Utterance {
                    speaker: persons[0].clone(),
                    text: UTTERANCES[rng.gen_range(0..UTTERANCES.len())].replace("{}", &anchor),
                }];
                if persons.len() > 1 {
                    utterances.push(Utterance {
                        speaker: persons[1].clone(),
                        text: REPLIES[rng.gen_range(0..REPLIES.len())].to_string(),
                    });
                }
                let on_screen_text = if rng.gen_bool(config.ocr_rate) {
                    loop {
                        let s = format!(
                            "{} {} {}",
                            SIGN_FIRST[rng.gen_range(0..8)],
                            SIGN_SECOND[rng.gen_range(0..8)],
                            rng.gen_range(1..100)
                        );
                        if signs.insert(s.clone()) {
                            break Some(s);
                        }
                    }
                } else {
                    None
                };
                let mut cameras: Vec<String> = manifest
                    .cameras
                    .iter()
                    .filter(|c| match (&c.kind, &c.wearer) {
                        (CameraKind::Ego, Some(w)) => persons.contains(w),
                        (CameraKind::Exo, _) => {
                            let idx: usize = c.id.trim_start_matches("exo").parse().unwrap_or(0);
                            idx >= 1 && PLACES[idx - 1] == place
                        }
                        _ => false,
                    })
                    .map(|c| c.id.clone())
                    .collect();
                cameras.sort();
                in_slot.push(Happening {
                    id: 0,
                    day,
                    window,
                    place,
                    persons,
                    verb: v.base.to_string(),
                    anchor,
                    anchor_noun: NOUNS[ni].to_string(),
                    count_object: count_object.to_string(),
                    count: rng.gen_range(1..=4),
                    utterances,
                    on_screen_text,
                    cameras,
                });
            }
            happenings.extend(in_slot);
        }
    }
    for (i, h) in happenings.iter_mut().enumerate() {
        h.id = i;
    }
    let script = GroundTruthScript {
        seed,
        config: config.clone(),
        happenings,
    };

    let mut records = Vec::new();
    for h in &script.happenings {
        for cam in &h.cameras {
            records.extend(records_for(&script, h, cam, &manifest, &centroids, &mut rng));
        }
    }
    let corpus = Corpus {
        manifest,
        lanes: LaneStore::new(records),
        catalogs,
        lexicons: Lexicons::default(),
    };
    Ok((corpus, script))
}

fn win(h: &Happening, a: u64, b: u64) -> TimeWindow {
    TimeWindow {
        start: h.window.start + a,
        end: (h.window.start + b).min(h.window.end),
    }
}

fn caption(camera: &str, window: TimeWindow, kind: CaptionKind, text: String) -> LaneRecord {
    LaneRecord {
        camera: camera.to_string(),
        window,
        payload: Payload::Caption(CaptionBody {
            text,
            caption_kind: kind,
        }),
    }
}

fn records_for(
    script: &GroundTruthScript,
    h: &Happening,
    cam: &str,
    manifest: &CorpusManifest,
    centroids: &BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    rng: &mut ChaCha8Rng,
) -> Vec<LaneRecord> {
    let wearer = manifest.camera(cam).and_then(|c| c.wearer.clone());
    let names = script.names(&h.persons);
    let actor = script.name_of(h.actor());
    let mut out = Vec::new();
    for p in &h.persons {
        if wearer.as_ref() == Some(p) {
            continue;
        }
        let (body, face) = &centroids[p];
        out.push(LaneRecord {
            camera: cam.to_string(),
            window: h.window,
            payload: Payload::Identity(IdentityBody {
                person: Some(p.clone()),
                body: jitter(rng, body),
                face: jitter(rng, face),
                face_score: 0.9,
            }),
        });
    }
    let v = h.verb();
    out.push(caption(
        cam,
        h.window,
        CaptionKind::Scene300s,
        format!("In the {}, {names} {} the {}.", h.place, v.base, h.anchor),
    ));
    out.push(caption(
        cam,
        win(h, 0, 30),
        CaptionKind::ActionVerb,
        format!("{actor} {} the {}.", v.third, h.anchor),
    ));
    out.push(caption(
        cam,
        win(h, 30, 60),
        CaptionKind::AvJoint,
        format!("{actor} talks while {} the {} in the {}.", v.gerund, h.anchor, h.place),
    ));
    out.push(caption(
        cam,
        h.window,
        CaptionKind::Narrative1800s,
        format!("{names} spend a few minutes in the {} with the {}.", h.place, h.anchor),
    ));
    out.push(caption(
        cam,
        h.window,
        CaptionKind::Reasoning,
        format!("{names} seem to be {} the {} together in the {}.", v.gerund, h.anchor, h.place),
    ));
    if let Some(sign) = &h.on_screen_text {
        out.push(caption(
            cam,
            win(h, 20, 40),
            CaptionKind::Scene300s,
            format!("On-screen text reads: {sign}."),
        ));
    }
    out.push(LaneRecord {
        camera: cam.to_string(),
        window: win(h, 0, 60),
        payload: Payload::Object(ObjectBody {
            label: h.anchor.clone(),
            region: REGIONS[h.id % REGIONS.len()].to_string(),
            score: 0.9,
        }),
    });
    for i in 0..h.count as usize {
        out.push(LaneRecord {
            camera: cam.to_string(),
            window: win(h, 5 + i as u64, 15 + i as u64),
            payload: Payload::Object(ObjectBody {
                label: h.count_object.clone(),
                region: REGIONS[i % REGIONS.len()].to_string(),
                score: 0.8,
            }),
        });
    }
    for (i, u) in h.utterances.iter().enumerate() {
        let mut candidates = vec![SpeakerCandidate {
            person: u.speaker.clone(),
            score: 0.9,
        }];
        candidates.extend(h.persons.iter().filter(|p| **p != u.speaker).take(1).map(|p| SpeakerCandidate {
            person: p.clone(),
            score: 0.1,
        }));
        out.push(LaneRecord {
            camera: cam.to_string(),
            window: win(h, 10 + 30 * i as u64, 20 + 30 * i as u64),
            payload: Payload::Transcript(TranscriptBody {
                text: u.text.clone(),
                speaker_candidates: candidates,
                speaker: Some(u.speaker.clone()),
            }),
        });
    }
    out.push(LaneRecord {
        camera: cam.to_string(),
        window: win(h, 0, 60),
        payload: Payload::Action(ActionBody {
            verb: v.base.to_string(),
            actor: h.actor().to_string(),
            co_actors: h.persons[1..].to_vec(),
        }),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors() {
        let bad = SynthConfig {
            days: 0,
            ..Default::default()
        };
        assert!(matches!(generate_corpus(1, &bad), Err(BenchError::Config(_))));
        let bad = SynthConfig {
            ego_cameras: 7,
            ..Default::default()
        };
        assert!(matches!(generate_corpus(1, &bad), Err(BenchError::Config(_))));
    }

    #[test]
    fn happenings_are_disjoint_and_chronological() {
        let (_, script) = generate_corpus(3, &SynthConfig::default()).unwrap();
        for w in script.happenings.windows(2) {
            assert!(w[0].window.end <= w[1].window.start);
        }
        assert!(script.happenings.iter().all(|h| !h.cameras.is_empty()));
    }

    #[test]
    fn anchors_are_unique() {
        let (_, script) = generate_corpus(5, &SynthConfig::default()).unwrap();
        let set: BTreeSet<&str> = script.happenings.iter().map(|h| h.anchor.as_str()).collect();
        assert_eq!(set.len(), script.happenings.len());
    }
}
