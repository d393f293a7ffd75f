use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidqa_core::cells::{BucketKey, CellKey, SubWindowKey};
use vidqa_core::retrieval::RankedList;
use vidqa_core::sva::{
    rank_evidence, validate_report, Claim, ClaimKind, EvidenceSpan, Localisation, Validation, Verdict, VerifierReport,
};
use vidqa_core::tmkg::{decide, SelectionMode};

const PHRASES: [&str; 5] = [
    "the sign on the door reads fresh bread daily",
    "pass me the blue mug please",
    "two coins on the table",
    "who was seen washing the copper kettle",
    "nothing here",
];

fn prompt() -> Vec<String> {
    vec![
        "Who was seen washing the copper kettle in this recording?".into(),
        "pass me the blue mug please".into(),
    ]
}

fn span(i: usize, text: &str) -> EvidenceSpan {
    EvidenceSpan {
        id: format!("s{i}"),
        kind: "transcript".into(),
        camera: "ego1".into(),
        start: 30000,
        end: 30010,
        text: text.into(),
    }
}

fn claim() -> impl Strategy<Value = Claim> {
    (
        0usize..4,
        prop::sample::select(PHRASES.to_vec()),
        prop::collection::vec(0usize..6, 0..3),
        any::<bool>(),
        prop::option::of(1u32..5),
    )
        .prop_map(|(k, text, cites, localised, count)| Claim {
            kind: [ClaimKind::Ocr, ClaimKind::AudioQuote, ClaimKind::Visual, ClaimKind::Context][k],
            text: text.into(),
            evidence_span_ids: cites.iter().map(|c| format!("s{c}")).collect(),
            localisations: if localised {
                vec![Localisation {
                    camera: "ego1".into(),
                    timestamp: 30001.0,
                    region: "left".into(),
                }]
            } else {
                vec![]
            },
            count_value: count,
        })
}

fn sub(slot: u32, cam: &str) -> SubWindowKey {
    SubWindowKey {
        camera: cam.into(),
        day: 1,
        slot,
    }
}

fn report() -> impl Strategy<Value = VerifierReport> {
    (
        100u32..106,
        prop::sample::select(vec!["ego1", "exo1"]),
        prop::option::of(prop::sample::select(vec!["A", "B", "C", "D"])),
        prop::collection::vec(claim(), 0..4),
        prop::sample::select(vec![0.2, 0.5, 0.9]),
    )
        .prop_map(|(slot, cam, label, claims, confidence)| VerifierReport {
            subwindow: sub(slot, cam),
            verdict: label.map_or(Verdict::Abstain, |l| Verdict::Supports(l.into())),
            claims,
            confidence,
            note: None,
            error: false,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn more_evidence_never_rejects(
        r in report(),
        present in prop::collection::vec(any::<bool>(), 6),
        texts in prop::collection::vec(prop::sample::select(PHRASES.to_vec()), 6),
        extra in 0usize..6,
        empty in any::<bool>(),
    ) {
        let mut spans: BTreeMap<String, EvidenceSpan> = (0..6)
            .filter(|i| present[*i])
            .map(|i| (format!("s{i}"), span(i, texts[i])))
            .collect();
        let before = validate_report(&r, &prompt(), &spans, empty, 6);
        spans.insert(format!("s{extra}"), span(extra, texts[extra]));
        let after = validate_report(&r, &prompt(), &spans, empty, 6);
        if before == Validation::Accept {
            prop_assert_eq!(after, Validation::Accept);
        }
    }

    #[test]
    fn ranking_ignores_report_order(reports in prop::collection::vec(report(), 0..8), seed in any::<u64>()) {
        let primary = BucketKey { cell: CellKey { day: 1, hour: 8 }, quarter: 2 };
        let ranked = rank_evidence(&reports, &primary);
        let mut shuffled = reports.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&rank_evidence(&shuffled, &primary), &ranked);
        prop_assert!(ranked.windows(2).all(|w| w[0].tier >= w[1].tier));
        let keys: Vec<&String> = ranked.iter().map(|i| &i.dedup_key).collect();
        let mut unique = keys.clone();
        unique.sort();
        unique.dedup();
        prop_assert_eq!(unique.len(), keys.len());
    }

    #[test]
    fn selection_thresholds(
        scores in prop::collection::vec(0.0f64..1.0, 1..10),
        tau_score in 0.0f64..1.2,
        tau_margin in 0.0f64..1.0,
        bump in 0.0f64..0.5,
        k in 1usize..5,
    ) {
        let top = scores.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
        let trace = RankedList::from_scores(scores.iter().enumerate().map(|(i, s)| (format!("o{i}"), s / top)));
        let (mode, s) = decide(&trace, tau_score, tau_margin, k);
        prop_assert!((0.0..=1.0).contains(&s.margin));
        prop_assert!((s.top - 1.0).abs() < 1e-12);
        match &mode {
            SelectionMode::Single(id) => {
                prop_assert!(s.top >= tau_score && s.margin >= tau_margin);
                prop_assert_eq!(Some(id.as_str()), trace.ids().next());
            }
            SelectionMode::Concat(ids) => prop_assert_eq!(ids.len(), k.min(trace.len())),
        }
        let (raised, _) = decide(&trace, tau_score, tau_margin + bump, k);
        if matches!(mode, SelectionMode::Concat(_)) {
            prop_assert!(matches!(raised, SelectionMode::Concat(_)));
        }
    }
}

#[test]
fn all_abstain_ranks_to_nothing() {
    let reports: Vec<VerifierReport> = (100..106)
        .map(|s| VerifierReport::abstain(sub(s, "ego1"), "nothing relevant"))
        .collect();
    let primary = BucketKey { cell: CellKey { day: 1, hour: 8 }, quarter: 2 };
    assert!(rank_evidence(&reports, &primary).is_empty());
}
