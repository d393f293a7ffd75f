//! Accuracy, per-intent breakdown, call statistics and failure tags.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use vidqa_core::engine::AnswerRecord;
use vidqa_core::query::{detect_intent, Lexicons, Question};

use crate::questions::QuestionTarget;
use crate::synth::GroundTruthScript;
use crate::BenchError;

/// Script and question targets, saved next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessTruth {
    pub script: GroundTruthScript,
    pub targets: BTreeMap<String, QuestionTarget>,
}

impl HarnessTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| vidqa_core::Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| {
            vidqa_core::Error::Parse {
                line: e.line(),
                message: e.to_string(),
            }
            .into()
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).expect("truth serializes");
        fs::write(path, body).map_err(|e| vidqa_core::Error::io(path, e).into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntentScore {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerStats {
    pub questions: usize,
    pub mean_total: f64,
    pub mean_model_calls: f64,
    pub min_total: usize,
    pub max_total: usize,
}

pub const WRONG_CELL: &str = "wrong_cell";
pub const ABSTAIN_FLOOD: &str = "abstain_flood";
pub const FALLBACK_USED: &str = "fallback_used";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    pub intent: String,
    pub correct: bool,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_intent: BTreeMap<String, IntentScore>,
    /// Keyed by pipeline name.
    pub ledger: BTreeMap<String, LedgerStats>,
    pub failure_tags: BTreeMap<String, usize>,
    pub outcomes: Vec<QuestionOutcome>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores `answers` against the gold labels. With `truth`, answers whose
/// focus windows miss the target happening are tagged `wrong_cell`.
pub fn evaluate(
    answers: &[AnswerRecord],
    questions: &[Question],
    truth: Option<&HarnessTruth>,
) -> Result<EvalReport, BenchError> {
    let by_id: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let answer_ids: BTreeSet<&str> = answers.iter().map(|a| a.question_id.as_str()).collect();
    let q_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    if answer_ids != q_ids || answer_ids.len() != answers.len() || q_ids.len() != questions.len() {
        let dupes = answers.len() != answer_ids.len();
        let mut unexpected: Vec<String> = answer_ids.difference(&q_ids).map(|s| s.to_string()).collect();
        if dupes {
            unexpected.push("<duplicate answer ids>".into());
        }
        return Err(BenchError::IdMismatch {
            missing: q_ids.difference(&answer_ids).map(|s| s.to_string()).collect(),
            unexpected,
        });
    }
    let lex = Lexicons::default();
    let mut per_intent: BTreeMap<String, IntentScore> = BTreeMap::new();
    let mut failure_tags: BTreeMap<String, usize> = [WRONG_CELL, ABSTAIN_FLOOD, FALLBACK_USED]
        .iter()
        .map(|t| (t.to_string(), 0))
        .collect();
    let mut totals: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    let mut outcomes = Vec::new();
    let mut correct = 0;
    for a in answers {
        let q = by_id[a.question_id.as_str()];
        let ok = q.answer.as_deref() == Some(a.choice.as_str());
        correct += ok as usize;
        let intent = detect_intent(&q.text, &lex).0.as_str().to_string();
        let s = per_intent.entry(intent.clone()).or_default();
        s.total += 1;
        s.correct += ok as usize;
        totals
            .entry(a.pipeline.as_str().to_string())
            .or_default()
            .push((a.ledger_total, a.model_calls));
        let mut tags = Vec::new();
        if let Some(t) = truth.and_then(|t| t.targets.get(&a.question_id).map(|x| (t, x))) {
            let (truth, target) = t;
            let windows = [target.anchor, target.evidence].map(|i| truth.script.happening(i).window);
            let hit = a.focus.iter().any(|f| windows.iter().any(|w| w.overlaps(f)));
            if !hit {
                tags.push(WRONG_CELL.to_string());
            }
        }
        if a.verification.is_some_and(|v| v.accepted == 0) {
            tags.push(ABSTAIN_FLOOD.to_string());
        }
        if a.fallback_used {
            tags.push(FALLBACK_USED.to_string());
        }
        for t in &tags {
            *failure_tags.get_mut(t.as_str()).expect("known tag") += 1;
        }
        outcomes.push(QuestionOutcome {
            question_id: a.question_id.clone(),
            intent,
            correct: ok,
            tags,
        });
    }
    for s in per_intent.values_mut() {
        s.accuracy = ratio(s.correct, s.total);
    }
    let ledger = totals
        .into_iter()
        .map(|(p, v)| {
            let n = v.len();
            let stats = LedgerStats {
                questions: n,
                mean_total: v.iter().map(|(t, _)| *t as f64).sum::<f64>() / n as f64,
                mean_model_calls: v.iter().map(|(_, m)| *m as f64).sum::<f64>() / n as f64,
                min_total: v.iter().map(|(t, _)| *t).min().unwrap_or(0),
                max_total: v.iter().map(|(t, _)| *t).max().unwrap_or(0),
            };
            (p, stats)
        })
        .collect();
    outcomes.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(EvalReport {
        total: answers.len(),
        correct,
        accuracy: ratio(correct, answers.len()),
        per_intent,
        ledger,
        failure_tags,
        outcomes,
    })
}
