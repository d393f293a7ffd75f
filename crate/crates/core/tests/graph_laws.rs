use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidqa_core::cells::{CellKey, SubWindowKey};
use vidqa_core::kg::{
    aggregate_global_events, link_edges, load_segment, persist_segment, EdgeKind, GlobalEvent, KgConfig,
    KnowledgeGraph, Observation,
};
use vidqa_core::lane::TimeWindow;
use vidqa_core::query::{Catalogs, Direction};

const PERSONS: [&str; 4] = ["alice", "bob", "carol", "dave"];
const PLACES: [Option<&str>; 3] = [None, Some("kitchen"), Some("garden")];
const VERBS: [&str; 4] = ["chop", "read", "wash", "carry"];
const TAGS: [&str; 6] = ["kettle", "sign", "mug", "coin", "lamp", "note"];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> BTreeSet<String> {
    pool.iter().filter(|_| rng.gen_bool(0.4)).map(|s| s.to_string()).collect()
}

/// 20 cameras by 10 slots over two days, so plenty of same-slot pairs.
fn fixture(seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..20 {
        for s in 0..10u32 {
            let day = 1 + s % 2;
            let key = SubWindowKey {
                camera: format!("cam{c:02}"),
                day,
                slot: 100 + s / 2,
            };
            let w = key.window();
            let start = w.start + rng.gen_range(0..100);
            out.push(Observation {
                id: Observation::id_for(&key),
                key,
                span: TimeWindow {
                    start,
                    end: start + rng.gen_range(1..200),
                },
                transcript_texts: vec![],
                caption_texts: vec![],
                action_tuples: vec![],
                object_labels: vec![],
                tags: pick(&mut rng, &TAGS),
                persons: pick(&mut rng, &PERSONS),
                verbs: pick(&mut rng, &VERBS),
                place: PLACES[rng.gen_range(0..3)].map(str::to_string),
            });
        }
    }
    out
}

fn jac(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let u = a.union(b).count();
    if u == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / u as f64
    }
}

fn brute_components(obs: &[Observation]) -> BTreeSet<BTreeSet<String>> {
    let n = obs.len();
    let linked = |a: &Observation, b: &Observation| {
        a.key.day == b.key.day
            && a.key.slot == b.key.slot
            && a.place == b.place
            && jac(&a.persons, &b.persons) >= 0.5
            && (!a.verbs.is_disjoint(&b.verbs) || jac(&a.tags, &b.tags) >= 0.3)
    };
    let mut seen = vec![false; n];
    let mut comps = BTreeSet::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut stack = vec![s];
        let mut comp = BTreeSet::new();
        seen[s] = true;
        while let Some(i) = stack.pop() {
            comp.insert(obs[i].id.clone());
            for j in 0..n {
                if !seen[j] && linked(&obs[i], &obs[j]) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comps.insert(comp);
    }
    comps
}

fn graph_of(obs: &[Observation]) -> KnowledgeGraph {
    let cfg = KgConfig::default();
    let (events, mut edges) = aggregate_global_events(obs, &Catalogs::default(), &cfg);
    edges.extend(link_edges(&events, &cfg));
    KnowledgeGraph::from_parts(obs.to_vec(), events, edges)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn aggregation_is_connected_components(seed in any::<u64>()) {
        let obs = fixture(seed);
        prop_assert_eq!(obs.len(), 200);
        let (events, evidence) = aggregate_global_events(&obs, &Catalogs::default(), &KgConfig::default());
        let got: BTreeSet<BTreeSet<String>> = events.iter().map(|e| e.members.clone()).collect();
        prop_assert_eq!(&got, &brute_components(&obs));
        prop_assert_eq!(evidence.len(), 200);
    }

    #[test]
    fn aggregation_ignores_order_and_repeats(seed in any::<u64>()) {
        let obs = fixture(seed);
        let cats = Catalogs::default();
        let cfg = KgConfig::default();
        let base = aggregate_global_events(&obs, &cats, &cfg);
        let mut shuffled = obs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(&aggregate_global_events(&shuffled, &cats, &cfg), &base);
        let mut doubled = obs.clone();
        doubled.extend(obs.iter().cloned());
        prop_assert_eq!(&aggregate_global_events(&doubled, &cats, &cfg), &base);
        let again = aggregate_global_events(&obs, &cats, &cfg);
        prop_assert_eq!(again, base);
    }

    #[test]
    fn precedes_is_one_sorted_chain(seed in any::<u64>()) {
        let g = graph_of(&fixture(seed));
        g.validate().unwrap();
        let precedes: Vec<_> = g.edges.iter().filter(|e| e.kind == EdgeKind::Precedes).collect();
        prop_assert_eq!(precedes.len(), g.events.len() - 1);
        let mut outs: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ins: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &precedes {
            *outs.entry(&e.from).or_default() += 1;
            *ins.entry(&e.to).or_default() += 1;
        }
        prop_assert!(outs.values().all(|c| *c == 1) && ins.values().all(|c| *c == 1));
        let head = g.events.keys().find(|id| !ins.contains_key(id.as_str())).unwrap();
        let walk = g.traverse_precedes(head, Direction::After, usize::MAX).unwrap();
        prop_assert_eq!(walk.len(), g.events.len() - 1);
        let mut prev: &GlobalEvent = &g.events[head];
        for id in &walk {
            let e = &g.events[id];
            prop_assert!((prev.span.start, &prev.id) < (e.span.start, &e.id));
            prev = e;
        }
        let back = g.traverse_precedes(walk.last().unwrap(), Direction::Before, usize::MAX).unwrap();
        prop_assert_eq!(back.last(), Some(head));
    }
}

#[test]
fn graph_round_trips_through_segments() {
    let g = graph_of(&fixture(5));
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    assert_eq!(KnowledgeGraph::load(dir.path()).unwrap(), g);
    let (segs, _) = g.segments();
    assert!(segs.len() > 1);
    for s in &segs {
        let key = CellKey { day: s.day, hour: s.hour };
        assert_eq!(&load_segment(dir.path(), key).unwrap(), s);
    }
}

#[test]
fn corrupt_segment_is_rejected() {
    let g = graph_of(&fixture(6));
    let dir = tempfile::tempdir().unwrap();
    let (segs, _) = g.segments();
    let path = persist_segment(dir.path(), &segs[0]).unwrap();
    let mut raw = std::fs::read_to_string(&path).unwrap();
    raw = raw.replacen("cam", "cbm", 1);
    std::fs::write(&path, raw).unwrap();
    let key = CellKey { day: segs[0].day, hour: segs[0].hour };
    assert!(load_segment(dir.path(), key).is_err());
}

#[test]
fn every_observation_in_exactly_one_event() {
    let g = graph_of(&fixture(7));
    for id in g.observations.keys() {
        assert_eq!(g.events.values().filter(|e| e.members.contains(id)).count(), 1);
        assert!(g.has_edge(EdgeKind::Evidence, id, &g.event_of(id).unwrap().id));
    }
}
