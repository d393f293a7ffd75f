use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use proptest::prelude::*;

use vidqa_core::lane::{
    build_action_timeline, gate_identity_propagation, load_lane, resolve_speakers_consensus, write_lane, ActionBody,
    CaptionBody, CaptionKind, CorpusManifest, GateDecision, GateThresholds, IdentityBody, LaneRecord, ObjectBody,
    Payload, SpeakerCandidate, TimeWindow, TranscriptBody,
};

const DAY1: u64 = 7 * 3600;

fn manifest() -> CorpusManifest {
    CorpusManifest::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/full_manifest.json")).unwrap()
}

fn cams() -> Vec<&'static str> {
    vec!["ego01", "ego02", "exo1", "exo2"]
}

fn people() -> Vec<&'static str> {
    vec!["allie", "bjorn", "cleo", "dara"]
}

fn window() -> impl Strategy<Value = TimeWindow> {
    (0u64..3000, 1u64..300).prop_map(|(s, d)| TimeWindow {
        start: DAY1 + s,
        end: DAY1 + s + d,
    })
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim)
}

fn record() -> impl Strategy<Value = LaneRecord> {
    let payload = prop_oneof![
        (prop::sample::select(vec!["A kettle.", "Allie reads.", "On-screen text reads: EXIT."]), 0usize..5).prop_map(
            |(t, k)| Payload::Caption(CaptionBody {
                text: t.into(),
                caption_kind: [
                    CaptionKind::Scene300s,
                    CaptionKind::Narrative1800s,
                    CaptionKind::ActionVerb,
                    CaptionKind::AvJoint,
                    CaptionKind::Reasoning
                ][k],
            })
        ),
        (prop::sample::select(people()), 0.0f32..1.0).prop_map(|(p, s)| Payload::Transcript(TranscriptBody {
            text: "pass the salt".into(),
            speaker_candidates: vec![SpeakerCandidate { person: p.into(), score: s }],
            speaker: None,
        })),
        (prop::sample::select(vec!["mug", "coin"]), 0.0f32..1.0).prop_map(|(l, s)| Payload::Object(ObjectBody {
            label: l.into(),
            region: "center".into(),
            score: s,
        })),
        prop::sample::select(people()).prop_map(|p| Payload::Action(ActionBody {
            verb: "wash".into(),
            actor: p.into(),
            co_actors: vec![],
        })),
        (prop::option::of(prop::sample::select(people())), unit_vec(256), unit_vec(256), 0.0f32..1.0).prop_map(
            |(p, b, f, s)| Payload::Identity(IdentityBody {
                person: p.map(str::to_string),
                body: b,
                face: f,
                face_score: s,
            })
        ),
    ];
    (prop::sample::select(cams()), window(), payload).prop_map(|(c, w, p)| LaneRecord {
        camera: c.into(),
        window: w,
        payload: p,
    })
}

fn ident(cam: &str, w: TimeWindow, person: Option<&str>, body: Vec<f32>, face: Vec<f32>) -> LaneRecord {
    LaneRecord {
        camera: cam.into(),
        window: w,
        payload: Payload::Identity(IdentityBody {
            person: person.map(str::to_string),
            body,
            face,
            face_score: 0.9,
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lane_files_are_stable(records in prop::collection::vec(record(), 0..20)) {
        let m = manifest();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_lane(&a, &records).unwrap();
        let loaded = load_lane(&a, &m).unwrap();
        prop_assert_eq!(loaded.len(), records.len());
        write_lane(&b, &loaded).unwrap();
        let again = load_lane(&b, &m).unwrap();
        prop_assert_eq!(&again, &loaded);
        write_lane(&a, &again).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn raising_gate_thresholds_never_admits(
        cb in unit_vec(4), ab in unit_vec(4), cf in unit_vec(4), centroid in unit_vec(4),
        body in -1.0f64..1.0, face in -1.0f64..1.0, db in 0.0f64..1.0, df in 0.0f64..1.0,
    ) {
        let w = TimeWindow { start: DAY1, end: DAY1 + 10 };
        let cand = ident("exo1", w, None, cb, cf);
        let anchor = ident("ego01", w, Some("allie"), ab, vec![0.0; 4]);
        let centroids = BTreeMap::from([("allie".to_string(), centroid)]);
        let lo = gate_identity_propagation(&cand, &anchor, &centroids, GateThresholds { body, face }).unwrap();
        let hi = gate_identity_propagation(&cand, &anchor, &centroids, GateThresholds { body: body + db, face: face + df }).unwrap();
        if hi != GateDecision::Reject {
            prop_assert_eq!(lo, hi);
        }
    }

    #[test]
    fn consensus_stays_within_candidates(
        specs in prop::collection::vec((prop::sample::select(cams()), window(), prop::collection::vec((prop::sample::select(people()), 0.0f32..1.0), 0..3)), 1..12),
        ids in prop::collection::vec((prop::sample::select(cams()), window(), prop::sample::select(people())), 0..8),
    ) {
        let m = manifest();
        let records: Vec<LaneRecord> = specs
            .iter()
            .map(|(c, w, cands)| LaneRecord {
                camera: c.to_string(),
                window: *w,
                payload: Payload::Transcript(TranscriptBody {
                    text: "hi".into(),
                    speaker_candidates: cands.iter().map(|(p, s)| SpeakerCandidate { person: p.to_string(), score: *s }).collect(),
                    speaker: None,
                }),
            })
            .collect();
        let identity: Vec<LaneRecord> = ids.iter().map(|(c, w, p)| ident(c, *w, Some(p), vec![1.0, 0.0], vec![1.0, 0.0])).collect();
        let out = resolve_speakers_consensus(&records, &identity, &m);
        prop_assert_eq!(out.len(), records.len());
        for (o, r) in out.iter().zip(&records) {
            let t = o.transcript().unwrap();
            if let Some(s) = &t.speaker {
                prop_assert!(r.transcript().unwrap().speaker_candidates.iter().any(|c| &c.person == s));
            }
        }
    }

    #[test]
    fn timeline_is_bounded_by_captions(
        caps in prop::collection::vec((prop::sample::select(cams()), window(), prop::sample::select(vec![
            "Allie washes and chops leeks", "Bjorn reads", "someone waits", "Cleo chops, stirs and washes",
        ]), any::<bool>()), 0..10),
        ids in prop::collection::vec((prop::sample::select(cams()), window(), prop::sample::select(people())), 0..8),
    ) {
        let captions: Vec<LaneRecord> = caps
            .iter()
            .map(|(c, w, t, action)| LaneRecord {
                camera: c.to_string(),
                window: *w,
                payload: Payload::Caption(CaptionBody {
                    text: t.to_string(),
                    caption_kind: if *action { CaptionKind::ActionVerb } else { CaptionKind::Scene300s },
                }),
            })
            .collect();
        let identity: Vec<LaneRecord> = ids.iter().map(|(c, w, p)| ident(c, *w, Some(p), vec![1.0], vec![1.0])).collect();
        let lex: BTreeSet<String> = ["wash", "chop", "stir", "read"].iter().map(|s| s.to_string()).collect();
        let out = build_action_timeline(&captions, &identity, &lex);
        let action_caps: Vec<&LaneRecord> = captions.iter().filter(|c| c.caption().unwrap().caption_kind == CaptionKind::ActionVerb).collect();
        prop_assert!(out.len() <= action_caps.len() * lex.len());
        for t in &out {
            prop_assert!(action_caps.iter().any(|c| c.window == t.span));
            prop_assert!(!t.co_actors.contains(&t.actor));
        }
    }
}
