//! Four-choice questions with gold labels, each aimed at one scripted happening.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vidqa_core::cells::BucketKey;
use vidqa_core::engine::Corpus;
use vidqa_core::gateway::LABELS;
use vidqa_core::lane::{CorpusManifest, Payload};
use vidqa_core::query::{Direction, Intent, Question};

use crate::synth::{manifest_for, GroundTruthScript, Happening, COUNTABLES, PLACES};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Who,
    Where,
    When,
    Quote,
    Sign,
    Count,
    Before,
    After,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 8] = [
        QuestionKind::Who,
        QuestionKind::Where,
        QuestionKind::When,
        QuestionKind::Quote,
        QuestionKind::Sign,
        QuestionKind::Count,
        QuestionKind::Before,
        QuestionKind::After,
    ];

    pub fn intent(&self) -> Intent {
        match self {
            QuestionKind::Who => Intent::Who,
            QuestionKind::Where => Intent::Where,
            QuestionKind::When => Intent::When,
            QuestionKind::Quote | QuestionKind::Sign => Intent::What,
            QuestionKind::Count => Intent::Count,
            QuestionKind::Before | QuestionKind::After => Intent::OrderBeforeAfter,
        }
    }

    pub fn direction(&self) -> Option<Direction> {
        match self {
            QuestionKind::Before => Some(Direction::Before),
            QuestionKind::After => Some(Direction::After),
            _ => None,
        }
    }
}

/// Relative question counts per kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentMix(pub BTreeMap<QuestionKind, u32>);

impl Default for IntentMix {
    fn default() -> Self {
        IntentMix(
            [
                (QuestionKind::Who, 15),
                (QuestionKind::Where, 15),
                (QuestionKind::When, 10),
                (QuestionKind::Quote, 15),
                (QuestionKind::Sign, 10),
                (QuestionKind::Count, 15),
                (QuestionKind::Before, 10),
                (QuestionKind::After, 10),
            ]
            .into_iter()
            .collect(),
        )
    }
}

impl IntentMix {
    pub fn only(kind: QuestionKind) -> Self {
        IntentMix([(kind, 1)].into_iter().collect())
    }

    /// Splits `n` by weight using largest remainders, ties to the earlier kind.
    pub fn allocate(&self, n: usize) -> Vec<(QuestionKind, usize)> {
        let total: u64 = self.0.values().map(|w| *w as u64).sum();
        if total == 0 {
            return Vec::new();
        }
        let mut out: Vec<(QuestionKind, usize, u64)> = self
            .0
            .iter()
            .map(|(k, w)| {
                let exact = n as u64 * *w as u64;
                (*k, (exact / total) as usize, exact % total)
            })
            .collect();
        let assigned: usize = out.iter().map(|(_, c, _)| c).sum();
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|a, b| out[*b].2.cmp(&out[*a].2).then(a.cmp(b)));
        for &i in order.iter().take(n - assigned) {
            out[i].1 += 1;
        }
        out.into_iter().filter(|(_, c, _)| *c > 0).map(|(k, c, _)| (k, c)).collect()
    }
}

/// What a question is about: the happening it names and the one whose
/// evidence answers it (they differ for order questions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTarget {
    pub kind: QuestionKind,
    pub anchor: usize,
    pub evidence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub questions: Vec<Question>,
    pub targets: BTreeMap<String, QuestionTarget>,
}

fn clock(t: u64) -> String {
    let sod = t % 86_400;
    format!("{:02}:{:02}", sod / 3600, (sod % 3600) / 60)
}

fn interior(h: &Happening, manifest: &CorpusManifest) -> bool {
    let day = manifest.day_window(h.day);
    let b = h.bucket();
    b != BucketKey::containing(day.start) && b != BucketKey::containing(day.end - 1)
}

struct Builder<'a> {
    script: &'a GroundTruthScript,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// Three distinct distractors from `pool`, none equal to `gold`.
    fn distractors(&mut self, gold: &str, pool: Vec<String>) -> Option<Vec<String>> {
        let mut seen = BTreeSet::from([gold.to_string()]);
        let mut uniq: Vec<String> = pool.into_iter().filter(|p| seen.insert(p.clone())).collect();
        uniq.shuffle(&mut self.rng);
        (uniq.len() >= 3).then(|| uniq.into_iter().take(3).collect())
    }
}

/// The happening right before or after `h` on the same day.
pub fn neighbour<'s>(script: &'s GroundTruthScript, h: &Happening, kind: QuestionKind) -> Option<&'s Happening> {
    let hs = &script.happenings;
    let n = match kind {
        QuestionKind::Before => hs.get(h.id.checked_sub(1)?)?,
        QuestionKind::After => hs.get(h.id + 1)?,
        _ => return None,
    };
    (n.day == h.day).then_some(n)
}

impl Builder<'_> {
    /// Question text, gold text, distractors and evidence happening.
    fn make(&mut self, h: &Happening, kind: QuestionKind) -> Option<(String, String, Vec<String>, usize)> {
        let s = self.script;
        let v = h.verb();
        let actor = s.name_of(h.actor());
        let others = s.happenings.iter().filter(|o| o.id != h.id);
        match kind {
            QuestionKind::Who => {
                let pool = s
                    .config_roster()
                    .into_iter()
                    .filter(|p| !h.persons.contains(p))
                    .map(|p| s.name_of(&p))
                    .collect();
                let d = self.distractors(&actor, pool)?;
                let q = format!("Who was seen {} the {} in this recording?", v.gerund, h.anchor);
                Some((q, actor, d, h.id))
            }
            QuestionKind::Where => {
                let pool = PLACES.iter().map(|p| p.to_string()).collect();
                let d = self.distractors(&h.place, pool)?;
                let q = format!("Where was {actor} {} the {} during the recording?", v.gerund, h.anchor);
                Some((q, h.place.clone(), d, h.id))
            }
            QuestionKind::When => {
                let gold = clock(h.window.start);
                let d = self.distractors(&gold, others.map(|o| clock(o.window.start)).collect())?;
                let q = format!("When did {actor} start {} the {} in the recording?", v.gerund, h.anchor);
                Some((q, gold, d, h.id))
            }
            QuestionKind::Quote => {
                let gold = h.utterances.first()?.text.clone();
                let pool = others.filter_map(|o| o.utterances.first().map(|u| u.text.clone())).collect();
                let d = self.distractors(&gold, pool)?;
                let q = format!("What did {actor} say while {} the {}?", v.gerund, h.anchor);
                Some((q, gold, d, h.id))
            }
            QuestionKind::Sign => {
                let gold = h.on_screen_text.clone()?;
                let d = self.distractors(&gold, others.filter_map(|o| o.on_screen_text.clone()).collect())?;
                let be = if h.persons.len() > 1 { "were" } else { "was" };
                let q = format!(
                    "What did the sign read while {} {be} {} the {}?",
                    s.names(&h.persons),
                    v.gerund,
                    h.anchor
                );
                Some((q, gold, d, h.id))
            }
            QuestionKind::Count => {
                let plural = COUNTABLES.iter().find(|(n, _)| *n == h.count_object)?.1;
                let q = format!(
                    "How many {plural} were visible while {actor} was {} the {}?",
                    v.gerund, h.anchor
                );
                Some((q, h.count.to_string(), Vec::new(), h.id))
            }
            QuestionKind::Before | QuestionKind::After => {
                let n = neighbour(s, h, kind)?;
                let gold = s.descriptor(n);
                let opposite = match kind {
                    QuestionKind::Before => neighbour(s, h, QuestionKind::After),
                    _ => neighbour(s, h, QuestionKind::Before),
                };
                let mut d: Vec<String> = opposite.map(|o| s.descriptor(o)).into_iter().collect();
                let pool = others.filter(|o| o.id != n.id).map(|o| s.descriptor(o)).collect();
                let mut rest = self.distractors(&gold, pool)?;
                rest.retain(|r| !d.contains(r));
                d.extend(rest);
                d.truncate(3);
                let word = if kind == QuestionKind::Before { "before" } else { "after" };
                let q = format!("What happened immediately {word} {actor} was {} the {}?", v.gerund, h.anchor);
                Some((q, gold, d, n.id))
            }
        }
    }
}

impl GroundTruthScript {
    fn config_roster(&self) -> Vec<String> {
        manifest_for(&self.config).roster.into_iter().map(|p| p.id).collect()
    }
}

/// `n` questions split by `mix`, each kind drawing distinct happenings away
/// from the first and last 15 minutes of a day.
pub fn generate_questions(script: &GroundTruthScript, n: usize, mix: &IntentMix) -> Result<QuestionSet, BenchError> {
    let manifest = manifest_for(&script.config);
    let mut b = Builder {
        script,
        rng: ChaCha8Rng::seed_from_u64(script.seed ^ 0x9e37_79b9_7f4a_7c15),
    };
    let mut drafted: Vec<(Question, QuestionTarget)> = Vec::new();
    for (kind, count) in mix.allocate(n) {
        let mut pool: Vec<&Happening> = script.happenings.iter().filter(|h| interior(h, &manifest)).collect();
        pool.shuffle(&mut b.rng);
        let mut made = 0;
        for h in pool {
            if made == count {
                break;
            }
            let Some((text, gold, distractors, evidence)) = b.make(h, kind) else {
                continue;
            };
            let mut choices: Vec<String> = if kind == QuestionKind::Count {
                (1..=4).map(|i| i.to_string()).collect()
            } else {
                let mut c = distractors;
                c.push(gold.clone());
                c.shuffle(&mut b.rng);
                c
            };
            choices.truncate(4);
            let gold_at = choices.iter().position(|c| *c == gold).expect("gold is among the choices");
            let mut q = Question::new(
                "",
                text,
                [&choices[0], &choices[1], &choices[2], &choices[3]].map(String::as_str),
            );
            q.answer = Some(LABELS[gold_at].to_string());
            drafted.push((
                q,
                QuestionTarget {
                    kind,
                    anchor: h.id,
                    evidence,
                },
            ));
            made += 1;
        }
        if made < count {
            return Err(BenchError::InsufficientEvents {
                intent: kind.intent().as_str().to_string(),
                needed: count,
                available: made,
            });
        }
    }
    drafted.shuffle(&mut b.rng);
    let mut set = QuestionSet {
        questions: Vec::new(),
        targets: BTreeMap::new(),
    };
    for (i, (mut q, t)) in drafted.into_iter().enumerate() {
        q.id = format!("q{:04}", i + 1);
        set.targets.insert(q.id.clone(), t);
        set.questions.push(q);
    }
    Ok(set)
}

/// Brute-force check that the lanes hold the evidence behind each gold
/// label. Returns the ids of questions that fail.
pub fn audit_solvable(corpus: &Corpus, script: &GroundTruthScript, set: &QuestionSet) -> Vec<String> {
    let mut failing = Vec::new();
    for q in &set.questions {
        let t = &set.targets[&q.id];
        let h = script.happening(t.evidence);
        let gold = q.answer.as_deref().and_then(|l| q.choice(l)).unwrap_or_default();
        let recs: Vec<_> = corpus
            .lanes
            .all()
            .filter(|r| h.visible_in(&r.camera, &r.window) && h.window.contains(&r.window))
            .collect();
        let ok = match t.kind {
            QuestionKind::Who => recs
                .iter()
                .any(|r| matches!(&r.payload, Payload::Action(a) if script.name_of(&a.actor) == gold)),
            QuestionKind::Where => recs
                .iter()
                .any(|r| matches!(&r.payload, Payload::Caption(c) if c.text.contains(gold))),
            QuestionKind::When => recs.iter().any(|r| clock(r.window.start) == gold && r.window.start == h.window.start),
            QuestionKind::Quote => recs
                .iter()
                .any(|r| matches!(&r.payload, Payload::Transcript(tr) if tr.text == gold)),
            QuestionKind::Sign => recs
                .iter()
                .any(|r| matches!(&r.payload, Payload::Caption(c) if c.text.contains(gold))),
            QuestionKind::Count => h.cameras.iter().any(|cam| {
                recs.iter()
                    .filter(|r| &r.camera == cam)
                    .filter(|r| matches!(&r.payload, Payload::Object(o) if o.label == h.count_object))
                    .count()
                    .to_string()
                    == gold
            }),
            QuestionKind::Before | QuestionKind::After => {
                let anchor = script.happening(t.anchor);
                let adjacent = match t.kind {
                    QuestionKind::Before => h.id + 1 == anchor.id,
                    _ => anchor.id + 1 == h.id,
                };
                adjacent
                    && gold == script.descriptor(h)
                    && recs
                        .iter()
                        .any(|r| matches!(&r.payload, Payload::Caption(c) if c.text.contains(&h.anchor)))
            }
        };
        if !ok {
            failing.push(q.id.clone());
        }
    }
    failing
}
