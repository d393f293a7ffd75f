//! Graph-side answering: threshold-gated observation selection and a single
//! grounded answer call with a three-stage fallback.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::{
    frame_ref, weighted_overlap_choice, AnswerRecord, Engine, NormaliseStage, Pipeline, SupportingView,
    TmkgConfig,
};
use crate::error::{Error, Result};
use crate::gateway::{Channel, Gateway, LocalRuleChannel, ModelRequest, PartKind, ReplySchema, RoleTag, UserPart};
use crate::kg::{predicate_bonus, KnowledgeGraph, Observation};
use crate::query::{parse_question, Intent, ParsedQuery, Question};
use crate::retrieval::{HybridIndex, RankedList};
use crate::sva::question_part;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "cells", rename_all = "snake_case")]
pub enum SelectionMode {
    Single(String),
    Concat(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub top: f64,
    pub second: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    pub scores: SelectionScores,
    /// Normalised scores after predicate bonuses, best first.
    pub trace: RankedList,
    /// Observation the lexical match pointed at before a PRECEDES step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remapped_from: Option<String>,
}

impl SelectionResult {
    pub fn selected(&self) -> Vec<&str> {
        match &self.mode {
            SelectionMode::Single(id) => vec![id.as_str()],
            SelectionMode::Concat(ids) => ids.iter().map(String::as_str).collect(),
        }
    }

    pub fn is_single(&self) -> bool {
        matches!(self.mode, SelectionMode::Single(_))
    }
}

fn normalised(list: &RankedList) -> RankedList {
    let top = list.top().map_or(0.0, |(_, s)| *s);
    if top <= 0.0 {
        return list.clone();
    }
    RankedList::from_scores(list.entries.iter().map(|(id, s)| (id.clone(), s / top)))
}

/// Scores and the single/concat decision, before any PRECEDES remap.
pub fn decide(trace: &RankedList, tau_score: f64, tau_margin: f64, k: usize) -> (SelectionMode, SelectionScores) {
    let top = trace.entries.first().map_or(0.0, |(_, s)| *s);
    let second = trace.entries.get(1).map_or(0.0, |(_, s)| *s);
    let margin = if top > 0.0 { ((top - second) / top).clamp(0.0, 1.0) } else { 0.0 };
    let scores = SelectionScores { top, second, margin };
    let mode = match trace.entries.first() {
        Some((id, _)) if top >= tau_score && margin >= tau_margin => SelectionMode::Single(id.clone()),
        _ => SelectionMode::Concat(trace.ids().take(k).map(str::to_string).collect()),
    };
    (mode, scores)
}

/// The observation hosting the event one PRECEDES step away from `obs_id`'s
/// event. Among its members the best-scored one wins, then the smallest id.
pub fn precedes_neighbour(
    graph: &KnowledgeGraph,
    obs_id: &str,
    parsed: &ParsedQuery,
    trace: &RankedList,
) -> Option<String> {
    let direction = parsed.direction?;
    let ev = graph.event_of(obs_id)?;
    let next = graph.traverse_precedes(&ev.id, direction, 1).ok()?.into_iter().next()?;
    let members = &graph.events.get(&next)?.members;
    members
        .iter()
        .max_by(|a, b| {
            let sa = trace.score_of(a).unwrap_or(f64::NEG_INFINITY);
            let sb = trace.score_of(b).unwrap_or(f64::NEG_INFINITY);
            sa.total_cmp(&sb).then_with(|| b.cmp(a))
        })
        .cloned()
}

fn remap_head(ids: &mut Vec<String>, to: String) {
    ids.retain(|i| *i != to);
    if ids.is_empty() {
        ids.push(to);
    } else {
        ids[0] = to;
    }
}

pub fn select_cells(
    parsed: &ParsedQuery,
    graph: &KnowledgeGraph,
    index: &HybridIndex,
    config: &TmkgConfig,
) -> Result<SelectionResult> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let base = normalised(&index.search(&parsed.raw, config.candidates)?);
    let trace = if parsed.has_relational_constraints() {
        let bonused = RankedList::from_scores(
            base.entries
                .iter()
                .map(|(id, s)| (id.clone(), s + predicate_bonus(id, parsed, graph, &config.betas))),
        );
        match config.normalise {
            NormaliseStage::BeforeBonus => bonused,
            NormaliseStage::AfterBonus => normalised(&bonused),
        }
    } else {
        base
    };
    let (mut mode, scores) = decide(&trace, config.tau_score, config.tau_margin, config.k);
    let mut remapped_from = None;
    if parsed.intent == Intent::OrderBeforeAfter {
        if let Some(head) = trace.top().map(|(id, _)| id.clone()) {
            if let Some(to) = precedes_neighbour(graph, &head, parsed, &trace) {
                remapped_from = Some(head);
                mode = match mode {
                    SelectionMode::Single(_) => SelectionMode::Single(to),
                    SelectionMode::Concat(mut ids) => {
                        remap_head(&mut ids, to);
                        SelectionMode::Concat(ids)
                    }
                };
            }
        }
    }
    Ok(SelectionResult {
        mode,
        scores,
        trace,
        remapped_from,
    })
}

/// One piece of bundled observation evidence as sent to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleItem {
    pub id: String,
    pub kind: String,
    pub camera: String,
    pub start: u64,
    pub end: u64,
    pub text: String,
}

fn bundle_of(o: &Observation) -> Vec<BundleItem> {
    let item = |i: usize, kind: &str, text: String| BundleItem {
        id: format!("{}#{i}", o.id),
        kind: kind.to_string(),
        camera: o.key.camera.clone(),
        start: o.span.start,
        end: o.span.end,
        text,
    };
    let mut out = Vec::new();
    for t in &o.transcript_texts {
        out.push(item(out.len(), "transcript", t.clone()));
    }
    for c in &o.caption_texts {
        out.push(item(out.len(), "caption", c.clone()));
    }
    for a in &o.action_tuples {
        out.push(item(out.len(), "action", format!("{} {}", a.actor, a.verb)));
    }
    if !o.object_labels.is_empty() {
        out.push(item(out.len(), "objects", o.object_labels.join(", ")));
    }
    if !o.tags.is_empty() {
        out.push(item(out.len(), "tags", o.tags.iter().cloned().collect::<Vec<_>>().join(" ")));
    }
    out
}

/// Selected observations plus the other views of their events, selected first.
pub fn bundled_observations<'a>(selection: &SelectionResult, graph: &'a KnowledgeGraph) -> Vec<&'a Observation> {
    let mut ids: Vec<String> = Vec::new();
    for id in selection.selected() {
        if !ids.iter().any(|i| i == id) {
            ids.push(id.to_string());
        }
    }
    let selected: Vec<String> = ids.clone();
    for id in &selected {
        if let Some(ev) = graph.event_of(id) {
            for m in &ev.members {
                if !ids.contains(m) {
                    ids.push(m.clone());
                }
            }
        }
    }
    ids.iter().filter_map(|id| graph.observations.get(id)).collect()
}

pub const ANSWER_SYSTEM: &str = "Answer the four-choice question from the frames and bundled \
evidence of the selected clips. Reply as JSON {\"choice\", \"confidence\", \"supporting_views\": \
[{\"camera\", \"window\"}], \"rationale\"}.";

fn evidence_items(req: &ModelRequest) -> Vec<BundleItem> {
    req.parts_of(PartKind::EvidenceRef)
        .filter_map(|p| serde_json::from_str(p).ok())
        .collect()
}

/// Third fallback stage: overlap between choices and caption excerpts only,
/// answering just when one label is strictly ahead.
pub fn caption_excerpt_channel(q: &Question) -> LocalRuleChannel {
    let choices: Vec<(String, String)> = q.choices.iter().map(|c| (c.label.clone(), c.text.clone())).collect();
    LocalRuleChannel::new("caption-excerpts", move |req| {
        let captions: Vec<(f64, String)> = evidence_items(req)
            .into_iter()
            .filter(|i| i.kind == "caption")
            .map(|i| (1.0, i.text))
            .collect();
        let (label, confidence, any) = weighted_overlap_choice(&choices, &captions, None);
        let best = overlap_score(&choices, &label, &captions);
        let unique = choices
            .iter()
            .filter(|(l, _)| *l != label)
            .all(|(l, _)| overlap_score(&choices, l, &captions) < best);
        (any && unique).then(|| {
            json!({
                "choice": label,
                "confidence": confidence,
                "supporting_views": [],
                "rationale": "caption excerpt overlap",
            })
        })
    })
}

fn overlap_score(choices: &[(String, String)], label: &str, evidence: &[(f64, String)]) -> f64 {
    use crate::text::content_tokens;
    let text = choices.iter().find(|(l, _)| l == label).map_or("", |(_, t)| t.as_str());
    let ct = content_tokens(text);
    evidence
        .iter()
        .map(|(w, t)| w * ct.intersection(&content_tokens(t)).count() as f64)
        .sum()
}

/// Default of last resort: overlap with transcripts (weight 4) and captions
/// (weight 2); no overlap at all gives A with zero confidence.
pub fn default_answer(q: &Question, bundle: &[BundleItem]) -> Value {
    let choices: Vec<(String, String)> = q.choices.iter().map(|c| (c.label.clone(), c.text.clone())).collect();
    let evidence: Vec<(f64, String)> = bundle
        .iter()
        .filter_map(|i| match i.kind.as_str() {
            "transcript" => Some((4.0, i.text.clone())),
            "caption" => Some((2.0, i.text.clone())),
            _ => None,
        })
        .collect();
    let (label, confidence, _) = weighted_overlap_choice(&choices, &evidence, None);
    json!({
        "choice": label,
        "confidence": confidence,
        "supporting_views": [],
        "rationale": "default: lexical overlap with transcripts and captions",
    })
}

pub fn answer_request(q: &Question, observations: &[&Observation]) -> ModelRequest {
    let mut req = ModelRequest::new(RoleTag::TmkgAnswer, ANSWER_SYSTEM, ReplySchema::AnswerV1)
        .with_part(question_part(q))
        .with_budget(512)
        .for_question(&q.id);
    for o in observations {
        req = req
            .with_part(UserPart::frame_ref(frame_ref(&o.key.camera, &o.key.window())))
            .with_parts(
                bundle_of(o)
                    .into_iter()
                    .map(|b| UserPart::evidence_ref(serde_json::to_string(&b).expect("bundle serializes"))),
            );
    }
    req
}

pub fn answer_grounded(q: &Question, selection: &SelectionResult, graph: &KnowledgeGraph, gateway: &Gateway) -> AnswerRecord {
    let observations = bundled_observations(selection, graph);
    let req = answer_request(q, &observations);
    let bundle = evidence_items(&req);
    let chain: Vec<Arc<dyn Channel>> = if observations.is_empty() {
        Vec::new()
    } else {
        let mut c: Vec<Arc<dyn Channel>> = Vec::new();
        c.extend(gateway.channel_for(RoleTag::TmkgAnswer));
        c.extend(gateway.alternative_for(RoleTag::TmkgAnswer));
        c.push(Arc::new(caption_excerpt_channel(q)));
        c
    };
    let reply = gateway.run_with_fallback(&req, &chain, || default_answer(q, &bundle));
    let parsed = reply.parsed.clone().unwrap_or_else(|| default_answer(q, &bundle));
    let selected: BTreeSet<&str> = selection.selected().into_iter().collect();
    let focus = observations
        .iter()
        .filter(|o| selected.contains(o.id.as_str()))
        .map(|o| o.span)
        .collect();
    let mut views: Vec<SupportingView> = parsed
        .get("supporting_views")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(|v| match v {
            Value::String(c) => Some(SupportingView {
                camera: c.clone(),
                window: String::new(),
            }),
            other => Some(SupportingView {
                camera: other.get("camera")?.as_str()?.to_string(),
                window: other.get("window").and_then(Value::as_str).unwrap_or_default().to_string(),
            }),
        })
        .collect();
    if views.is_empty() {
        views = observations
            .iter()
            .filter(|o| selected.contains(o.id.as_str()))
            .map(|o| SupportingView {
                camera: o.key.camera.clone(),
                window: o.key.to_string(),
            })
            .collect();
    }
    AnswerRecord {
        question_id: q.id.clone(),
        choice: parsed["choice"].as_str().unwrap_or("A").to_string(),
        confidence: parsed["confidence"].as_f64().unwrap_or(0.0),
        supporting_views: views,
        rationale: parsed["rationale"].as_str().unwrap_or_default().to_string(),
        ledger_total: 0,
        model_calls: 0,
        pipeline: Pipeline::Tmkg,
        focus,
        fallback_used: reply.synthetic || reply.backend_id != chain.first().map_or("", |c| c.id()),
        verification: None,
    }
}

pub fn answer_question_tmkg(q: &Question, engine: &Engine, gateway: &Gateway) -> Result<AnswerRecord> {
    gateway.ledger().begin(&q.id);
    let corpus = &engine.corpus;
    let parsed = parse_question(q, &corpus.manifest, &corpus.catalogs, &corpus.lexicons);
    let selection = select_cells(&parsed, &engine.graph, &engine.obs_index, &engine.config.tmkg)?;
    let mut record = answer_grounded(q, &selection, &engine.graph, gateway);
    let report = gateway.ledger().report(&q.id)?;
    record.ledger_total = report.total;
    record.model_calls = report.model_calls;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(scores: &[(&str, f64)]) -> RankedList {
        RankedList::from_scores(scores.iter().map(|(i, s)| (i.to_string(), *s)))
    }

    #[test]
    fn strong_unique_match_is_single() {
        let (mode, s) = decide(&list(&[("a", 1.0), ("b", 0.3), ("c", 0.2)]), 0.55, 0.2, 3);
        assert_eq!(mode, SelectionMode::Single("a".into()));
        assert!((s.margin - 0.7).abs() < 1e-12);
    }

    #[test]
    fn near_tie_is_concat_of_k() {
        let (mode, _) = decide(&list(&[("a", 1.0), ("b", 0.95), ("c", 0.2), ("d", 0.1)]), 0.55, 0.2, 3);
        assert_eq!(mode, SelectionMode::Concat(vec!["a".into(), "b".into(), "c".into()]));
    }

    #[test]
    fn caption_rule_needs_a_unique_winner() {
        let q = Question::new("q", "What did they hold?", ["red kettle", "blue mug", "green lamp", "red mug"]);
        let ch = caption_excerpt_channel(&q);
        let cap = |t: &str| {
            UserPart::evidence_ref(
                json!({"id": "x", "kind": "caption", "camera": "exo1", "start": 0, "end": 1, "text": t}).to_string(),
            )
        };
        let req = ModelRequest::new(RoleTag::TmkgAnswer, "", ReplySchema::AnswerV1).with_part(cap("a green lamp glows"));
        let out: Value = serde_json::from_str(&ch.complete(&req).unwrap()).unwrap();
        assert_eq!(out["choice"], "C");
        let tied = ModelRequest::new(RoleTag::TmkgAnswer, "", ReplySchema::AnswerV1).with_part(cap("something red"));
        assert!(ch.complete(&tied).is_err());
    }

    #[test]
    fn default_without_overlap_is_a() {
        let q = Question::new("q", "?", ["w", "x", "y", "z"]);
        let v = default_answer(&q, &[]);
        assert_eq!(v["choice"], "A");
        assert_eq!(v["confidence"], 0.0);
    }
}
