//! Search, Verify, Answer.
//!
//! Search narrows the corpus to one 15-minute primary window. Verify checks
//! the sub-windows around it one by one under four output rules (no echo,
//! abstain, localise, ground). Answer ranks the surviving evidence by tier
//! and asks a single judge.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cells::{adjacent_subwindows, BucketKey, CellKey, DocKey, SubWindowKey};
use crate::engine::{
    frame_ref, weighted_overlap_choice, AnswerRecord, Engine, Pipeline, SupportingView, VerificationStats,
};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ModelReply, ModelRequest, ReplySchema, RoleTag, UserPart, LABELS};
use crate::lane::{CaptionKind, LaneRecord, Payload};
use crate::query::{parse_question, ParsedQuery, Question};
use crate::retrieval::{score_buckets, RankedList};
use crate::text::tokenize;

/// Prefix the caption lane uses for text read off the scene.
pub const OCR_PREFIX: &str = "On-screen text reads:";

const EMPTY_NOTE: &str = "empty clip";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub cells: RankedList,
    pub buckets: RankedList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub primary_window: BucketKey,
    pub supporting: Vec<(String, BucketKey)>,
    pub tentative_choice: Option<String>,
    pub candidate_trace: SearchTrace,
    /// The final pick came from retrieval order, not the model.
    pub fallback: bool,
}

pub fn question_part(q: &Question) -> UserPart {
    let mut s = format!("Question: {}", q.text);
    for c in &q.choices {
        s.push_str(&format!("\n{}. {}", c.label, c.text));
    }
    UserPart::text(s)
}

fn candidate_part(id: &str, kind: &str, text: &str, max_chars: usize) -> UserPart {
    let excerpt: String = text.chars().take(max_chars).collect();
    UserPart::evidence_ref(json!({"id": id, "kind": kind, "text": excerpt}).to_string())
}

/// Reorders `list` by a model ranking: ids named by the model first (in its
/// order), then the rest in their original order.
fn apply_ranking(list: &RankedList, reply: Option<&ModelReply>) -> RankedList {
    let Some(ranking) = reply.and_then(|r| r.field("ranking")).and_then(Value::as_array) else {
        return list.clone();
    };
    let known: HashSet<&str> = list.ids().collect();
    let mut order: Vec<String> = Vec::new();
    for id in ranking.iter().filter_map(Value::as_str) {
        if known.contains(id) && !order.iter().any(|o| o == id) {
            order.push(id.to_string());
        }
    }
    for id in list.ids() {
        if !order.iter().any(|o| o == id) {
            order.push(id.to_string());
        }
    }
    let n = order.len() as f64;
    RankedList {
        entries: order
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, n - i as f64))
            .collect(),
    }
}

fn in_scope(id: &str, parsed: &ParsedQuery) -> bool {
    let Ok(DocKey::Cell(c)) = id.parse::<DocKey>() else {
        return false;
    };
    let day_ok = parsed.day.is_none_or(|d| d == c.day);
    let time_ok = parsed.time_range.is_none_or(|r| {
        let (s, e) = (c.hour * 60, c.hour * 60 + 59);
        r.start <= e && s <= r.end
    });
    day_ok && time_ok
}

/// Narrows the corpus to a primary 15-minute window.
pub fn search(
    q: &Question,
    parsed: &ParsedQuery,
    engine: &Engine,
    gateway: &Gateway,
    skip_narrowing: bool,
) -> Result<SearchOutcome> {
    if engine.cell_docs.iter().all(|d| d.text.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let cfg = &engine.config.sva;
    let query = q.text.as_str();
    let mut cells = engine
        .cell_index
        .search_filtered(query, cfg.cell_candidates, &|id| in_scope(id, parsed))?;
    if cells.is_empty() {
        cells = engine.cell_index.search(query, cfg.cell_candidates)?;
    }
    if cells.is_empty() {
        // nothing matched lexically or densely; fall back to key order
        cells = RankedList::from_scores(
            engine
                .cell_docs
                .iter()
                .filter(|d| !d.text.is_empty())
                .take(cfg.cell_candidates)
                .map(|d| (d.id(), 0.0)),
        );
    }

    let rerank = ModelRequest::new(
        RoleTag::SearchRerank,
        "Rank the candidate hour-long windows by how likely they contain the answer. \
         Reply as JSON {\"ranking\": [window ids, best first]}.",
        ReplySchema::RerankV1,
    )
    .with_part(question_part(q))
    .with_parts(
        cells
            .ids()
            .map(|id| candidate_part(id, "cell", engine.cell_text(id), cfg.excerpt_chars)),
    )
    .with_budget(256)
    .for_question(&q.id);
    let reply = gateway.send_role(&rerank).ok();
    let cells = apply_ranking(&cells, reply.as_ref());

    let mut buckets = score_buckets(&cells, &engine.bucket_index, query, cfg.bucket_cells)?;
    if buckets.is_empty() {
        let top_cell: CellKey = cells.ids().next().expect("cells non-empty").parse()?;
        buckets = RankedList::from_scores(top_cell.buckets().map(|b| (b.to_string(), 0.0)));
    }
    let mut buckets = buckets.truncate(cfg.bucket_candidates);
    if !skip_narrowing {
        let narrow = ModelRequest::new(
            RoleTag::SearchRerank,
            "Rank the candidate 15-minute windows by how likely they contain the answer. \
             Reply as JSON {\"ranking\": [window ids, best first]}.",
            ReplySchema::RerankV1,
        )
        .with_part(question_part(q))
        .with_parts(
            buckets
                .ids()
                .map(|id| candidate_part(id, "bucket", engine.bucket_text(id), cfg.excerpt_chars)),
        )
        .with_budget(256)
        .for_question(&q.id);
        let reply = gateway.send_role(&narrow).ok();
        buckets = apply_ranking(&buckets, reply.as_ref());
    }
    let finalists = buckets.clone().truncate(cfg.final_candidates);
    let cameras: Vec<&str> = engine.manifest().cameras.iter().map(|c| c.id.as_str()).collect();
    let pick = ModelRequest::new(
        RoleTag::SearchFinal,
        "Pick the primary 15-minute window that answers the question, the cameras whose \
         views of that or a neighbouring window support it, and a tentative answer. Reply as \
         JSON {\"primary\": window id, \"supporting\": [{\"camera\", \"window\"}], \
         \"tentative_choice\": label or null}.",
        ReplySchema::SearchFinalV1,
    )
    .with_part(question_part(q))
    .with_part(UserPart::text(format!("Cameras: {}", cameras.join(", "))))
    .with_parts(
        finalists
            .ids()
            .map(|id| candidate_part(id, "bucket", engine.bucket_text(id), cfg.excerpt_chars)),
    )
    .with_budget(512)
    .for_question(&q.id);
    let reply = gateway.send_role(&pick).ok();
    let top_bucket: BucketKey = finalists.ids().next().expect("buckets non-empty").parse()?;
    let trace = SearchTrace {
        cells,
        buckets: buckets.clone(),
    };
    let parsed_pick = reply.as_ref().and_then(|r| {
        let primary: BucketKey = r.field("primary")?.as_str()?.parse().ok()?;
        engine.bucket_index.text.doc_ids.contains(&primary.to_string()).then_some((r, primary))
    });
    let Some((r, primary)) = parsed_pick else {
        return Ok(SearchOutcome {
            primary_window: top_bucket,
            supporting: Vec::new(),
            tentative_choice: None,
            candidate_trace: trace,
            fallback: true,
        });
    };
    let mut supporting = Vec::new();
    for s in r.field("supporting").and_then(Value::as_array).into_iter().flatten() {
        let (Some(cam), Some(win)) = (s["camera"].as_str(), s["window"].as_str()) else {
            continue;
        };
        let Ok(bk) = win.parse::<BucketKey>() else { continue };
        if engine.manifest().camera(cam).is_some() && (bk.ordinal() - primary.ordinal()).abs() <= 1 {
            supporting.push((cam.to_string(), bk));
        }
    }
    Ok(SearchOutcome {
        primary_window: primary,
        supporting,
        tentative_choice: r
            .field("tentative_choice")
            .and_then(Value::as_str)
            .map(str::to_string),
        candidate_trace: trace,
        fallback: false,
    })
}

/// Supporting cameras first, then the manifest's cameras in order, up to `n`.
pub fn expansion_cameras(outcome: &SearchOutcome, engine: &Engine, n: usize) -> Vec<String> {
    let mut cams: Vec<String> = Vec::new();
    let all = engine.manifest().cameras.iter().map(|c| &c.id);
    for c in outcome.supporting.iter().map(|(c, _)| c).chain(all) {
        if cams.len() == n {
            break;
        }
        if !cams.contains(c) {
            cams.push(c.clone());
        }
    }
    cams
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKind {
    Ocr,
    AudioQuote,
    Visual,
    Context,
}

impl ClaimKind {
    pub fn tier(&self) -> u8 {
        match self {
            ClaimKind::Ocr => 3,
            ClaimKind::AudioQuote => 2,
            ClaimKind::Visual => 1,
            ClaimKind::Context => 0,
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            ClaimKind::Ocr => 8.0,
            ClaimKind::AudioQuote => 4.0,
            ClaimKind::Visual => 2.0,
            ClaimKind::Context => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localisation {
    pub camera: String,
    pub timestamp: f64,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub kind: ClaimKind,
    pub text: String,
    pub evidence_span_ids: Vec<String>,
    #[serde(default)]
    pub localisations: Vec<Localisation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_value: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "label", rename_all = "snake_case")]
pub enum Verdict {
    Supports(String),
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub subwindow: SubWindowKey,
    pub verdict: Verdict,
    pub claims: Vec<Claim>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// The gateway call failed.
    #[serde(default)]
    pub error: bool,
}

impl VerifierReport {
    pub fn abstain(subwindow: SubWindowKey, note: impl Into<String>) -> Self {
        VerifierReport {
            subwindow,
            verdict: Verdict::Abstain,
            claims: Vec::new(),
            confidence: 0.0,
            note: Some(note.into()),
            error: false,
        }
    }

    /// Parses a `verify_v1` reply body.
    pub fn from_reply(subwindow: SubWindowKey, v: &Value) -> Option<Self> {
        let verdict = match v.get("verdict")?.as_str()? {
            "supports" => Verdict::Supports(v.get("label")?.as_str()?.to_string()),
            "abstain" => Verdict::Abstain,
            _ => return None,
        };
        let claims: Vec<Claim> = match v.get("claims") {
            None | Some(Value::Null) => Vec::new(),
            Some(c) => serde_json::from_value(c.clone()).ok()?,
        };
        Some(VerifierReport {
            subwindow,
            verdict,
            claims,
            confidence: v.get("confidence")?.as_f64()?,
            note: None,
            error: false,
        })
    }

    /// The reply body that [`VerifierReport::from_reply`] reads back.
    pub fn to_reply(&self) -> Value {
        let (verdict, label) = match &self.verdict {
            Verdict::Supports(l) => ("supports", Some(l.clone())),
            Verdict::Abstain => ("abstain", None),
        };
        json!({
            "verdict": verdict,
            "label": label,
            "claims": self.claims,
            "confidence": self.confidence,
        })
    }
}

/// A record shown to the verifier under a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSpan {
    pub id: String,
    pub kind: String,
    pub camera: String,
    pub start: u64,
    pub end: u64,
    pub text: String,
}

impl EvidenceSpan {
    pub fn from_record(id: String, r: &LaneRecord) -> Self {
        let kind = match &r.payload {
            Payload::Caption(c) if c.text.starts_with(OCR_PREFIX) => "ocr".to_string(),
            Payload::Caption(c) => format!("caption:{}", caption_kind_name(c.caption_kind)),
            _ => r.lane().to_string(),
        };
        EvidenceSpan {
            id,
            kind,
            camera: r.camera.clone(),
            start: r.window.start,
            end: r.window.end,
            text: r.render(),
        }
    }
}

fn caption_kind_name(k: CaptionKind) -> &'static str {
    match k {
        CaptionKind::Scene300s => "scene_300s",
        CaptionKind::Narrative1800s => "narrative_1800s",
        CaptionKind::ActionVerb => "action_verb",
        CaptionKind::AvJoint => "av_joint",
        CaptionKind::Reasoning => "reasoning",
    }
}

pub fn spans_for(sub: &SubWindowKey, records: &[LaneRecord]) -> Vec<EvidenceSpan> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| EvidenceSpan::from_record(format!("{sub}#{i}"), r))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    Ground,
    NoEcho,
    Abstain,
    Localise,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Ground => "GROUND",
            RejectReason::NoEcho => "NO-ECHO",
            RejectReason::Abstain => "ABSTAIN",
            RejectReason::Localise => "LOCALISE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Accept,
    Reject(RejectReason),
}

fn ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if tokens.len() < n || n == 0 {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// The four output rules. Pure.
pub fn validate_report(
    r: &VerifierReport,
    prompt_context: &[String],
    evidence_spans: &BTreeMap<String, EvidenceSpan>,
    empty_flag: bool,
    ngram: usize,
) -> Validation {
    if empty_flag && matches!(r.verdict, Verdict::Supports(_)) {
        return Validation::Reject(RejectReason::Abstain);
    }
    if r
        .claims
        .iter()
        .flat_map(|c| &c.evidence_span_ids)
        .any(|id| !evidence_spans.contains_key(id))
    {
        return Validation::Reject(RejectReason::Ground);
    }
    if r
        .claims
        .iter()
        .any(|c| c.count_value.is_some() && c.localisations.is_empty())
    {
        return Validation::Reject(RejectReason::Localise);
    }
    let prompt_tokens: Vec<Vec<String>> = prompt_context.iter().map(|t| tokenize(t)).collect();
    let prompt_grams: HashSet<&[String]> = prompt_tokens.iter().flat_map(|t| ngrams(t, ngram)).collect();
    for c in &r.claims {
        if !matches!(c.kind, ClaimKind::AudioQuote | ClaimKind::Ocr) {
            continue;
        }
        let claim_tokens = tokenize(&c.text);
        let echoed: Vec<&[String]> = ngrams(&claim_tokens, ngram)
            .into_iter()
            .filter(|g| prompt_grams.contains(g))
            .collect();
        if echoed.is_empty() {
            continue;
        }
        let cited: Vec<Vec<String>> = c
            .evidence_span_ids
            .iter()
            .filter_map(|id| evidence_spans.get(id))
            .map(|s| tokenize(&s.text))
            .collect();
        let cited_grams: HashSet<&[String]> = cited.iter().flat_map(|t| ngrams(t, ngram)).collect();
        if echoed.iter().any(|g| !cited_grams.contains(g)) {
            return Validation::Reject(RejectReason::NoEcho);
        }
    }
    Validation::Accept
}

pub const VERIFY_SYSTEM: &str = "You verify one 5-minute clip from one camera against a \
four-choice question. Follow four rules. No echo: never quote wording from the question or \
choices unless the same words occur in a cited evidence span. Abstain: if the clip holds \
nothing relevant, reply with verdict abstain. Localise: every count must list a camera, \
timestamp and region for the counted items. Ground: every claim cites the ids of the evidence \
spans it rests on. Reply as JSON {\"verdict\": \"supports\"|\"abstain\", \"label\", \"claims\": \
[{\"kind\": \"ocr\"|\"audio_quote\"|\"visual\"|\"context\", \"text\", \"evidence_span_ids\", \
\"localisations\", \"count_value\"}], \"confidence\"}.";

pub fn prompt_context(q: &Question) -> Vec<String> {
    let mut v = vec![q.text.clone()];
    v.extend(q.choices.iter().map(|c| c.text.clone()));
    v
}

/// Builds the verification request for one sub-window.
pub fn verify_request(sub: &SubWindowKey, q: &Question, spans: &[EvidenceSpan]) -> ModelRequest {
    ModelRequest::new(RoleTag::Verify, VERIFY_SYSTEM, ReplySchema::VerifyV1)
        .with_part(question_part(q))
        .with_part(UserPart::text(format!("Clip {sub}")))
        .with_part(UserPart::frame_ref(frame_ref(&sub.camera, &sub.window())))
        .with_parts(
            spans
                .iter()
                .map(|s| UserPart::evidence_ref(serde_json::to_string(s).expect("spans serialize"))),
        )
        .with_budget(512)
        .for_question(&q.id)
}

/// Verifies one sub-window. Empty sub-windows abstain without a call;
/// replies breaking a rule become abstentions.
pub fn verify(sub: &SubWindowKey, q: &Question, engine: &Engine, gateway: &Gateway) -> VerifierReport {
    let records = engine.records_in(sub);
    if records.is_empty() {
        return VerifierReport::abstain(sub.clone(), EMPTY_NOTE);
    }
    let spans = spans_for(sub, records);
    let req = verify_request(sub, q, &spans);
    let reply = match gateway.send_role(&req) {
        Ok(r) => r,
        Err(e) => {
            let mut r = VerifierReport::abstain(sub.clone(), format!("gateway error: {e}"));
            r.error = true;
            return r;
        }
    };
    let Some(report) = reply.parsed.as_ref().and_then(|v| VerifierReport::from_reply(sub.clone(), v)) else {
        let mut r = VerifierReport::abstain(sub.clone(), "unreadable reply");
        r.error = true;
        return r;
    };
    let span_map: BTreeMap<String, EvidenceSpan> = spans.into_iter().map(|s| (s.id.clone(), s)).collect();
    match validate_report(
        &report,
        &prompt_context(q),
        &span_map,
        false,
        engine.config.sva.echo_ngram,
    ) {
        Validation::Accept => report,
        Validation::Reject(reason) => VerifierReport::abstain(sub.clone(), format!("validator rejected: {reason}")),
    }
}

/// Verifies all keys concurrently (bounded by the gateway); output follows `keys`.
pub fn verify_all(keys: &[SubWindowKey], q: &Question, engine: &Engine, gateway: &Gateway) -> Vec<VerifierReport> {
    thread::scope(|s| {
        let handles: Vec<_> = keys
            .iter()
            .map(|k| s.spawn(move || verify(k, q, engine, gateway)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("verification thread panicked"))
            .collect()
    })
}

pub fn verification_stats(reports: &[VerifierReport]) -> VerificationStats {
    let mut s = VerificationStats {
        subwindows: reports.len(),
        ..Default::default()
    };
    for r in reports {
        match (&r.note, r.error, &r.verdict) {
            (_, true, _) => s.errors += 1,
            (Some(n), _, _) if n == EMPTY_NOTE => s.empty += 1,
            (Some(_), _, _) => s.rejected += 1,
            (None, _, Verdict::Abstain) => s.abstained += 1,
            (None, _, Verdict::Supports(_)) => s.accepted += 1,
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub tier: u8,
    pub kind: ClaimKind,
    pub text: String,
    pub source: SubWindowKey,
    pub confidence: f64,
    pub dedup_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

pub fn dedup_key(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Flattens claims, orders them by (tier desc, confidence desc, distance to
/// the primary window asc, source asc, text asc) and keeps the first item per
/// normalised text.
pub fn rank_evidence(reports: &[VerifierReport], primary: &BucketKey) -> Vec<EvidenceItem> {
    let mut items: Vec<EvidenceItem> = reports
        .iter()
        .flat_map(|r| {
            let label = match &r.verdict {
                Verdict::Supports(l) => Some(l.clone()),
                Verdict::Abstain => None,
            };
            r.claims.iter().map(move |c| EvidenceItem {
                tier: c.kind.tier(),
                kind: c.kind,
                text: c.text.clone(),
                source: r.subwindow.clone(),
                confidence: r.confidence,
                dedup_key: dedup_key(&c.text),
                label: label.clone(),
            })
        })
        .collect();
    let pmid = primary.window().midpoint2() as i64;
    items.sort_by(|a, b| {
        let da = (a.source.window().midpoint2() as i64 - pmid).abs();
        let db = (b.source.window().midpoint2() as i64 - pmid).abs();
        b.tier
            .cmp(&a.tier)
            .then_with(|| b.confidence.total_cmp(&a.confidence))
            .then_with(|| da.cmp(&db))
            .then_with(|| a.source.cmp(&b.source))
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut seen = BTreeSet::new();
    items.retain(|i| seen.insert(i.dedup_key.clone()));
    items
}

pub const JUDGE_SYSTEM: &str = "Answer the four-choice question from the ranked evidence. \
Evidence tiers rank OCR above audio quotes above visual descriptions above context. Reply as \
JSON {\"choice\", \"confidence\", \"supporting_views\": [{\"camera\", \"window\"}], \"rationale\"}.";

fn views_from_reply(reply: &ModelReply, default_window: &str) -> Vec<SupportingView> {
    reply
        .field("supporting_views")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(|v| match v {
            Value::String(c) => Some(SupportingView {
                camera: c.clone(),
                window: default_window.to_string(),
            }),
            other => Some(SupportingView {
                camera: other.get("camera")?.as_str()?.to_string(),
                window: other
                    .get("window")
                    .and_then(Value::as_str)
                    .unwrap_or(default_window)
                    .to_string(),
            }),
        })
        .collect()
}

/// Tier-weighted overlap between evidence and choices; ties go to the
/// tentative choice when it is tied, otherwise to the first tied label.
pub fn judge_fallback(q: &Question, ranked: &[EvidenceItem], tentative: Option<&str>) -> (String, f64) {
    let choices: Vec<(String, String)> = q.choices.iter().map(|c| (c.label.clone(), c.text.clone())).collect();
    let evidence: Vec<(f64, String)> = ranked.iter().map(|i| (i.kind.weight(), i.text.clone())).collect();
    let (label, conf, _) = weighted_overlap_choice(&choices, &evidence, tentative);
    (label, conf)
}

pub fn judge_request(
    q: &Question,
    ranked: &[EvidenceItem],
    outcome: &SearchOutcome,
    prior: Option<&ModelReply>,
) -> ModelRequest {
    let tentative = outcome.tentative_choice.as_deref().unwrap_or("none");
    let prior_text = prior
        .and_then(|p| p.field("reasoning"))
        .and_then(Value::as_str)
        .unwrap_or("no external prior");
    ModelRequest::new(RoleTag::Judge, JUDGE_SYSTEM, ReplySchema::AnswerV1)
        .with_part(question_part(q))
        .with_part(UserPart::text(format!("Primary window: {}", outcome.primary_window)))
        .with_part(UserPart::text(format!("Tentative answer from search: {tentative}")))
        .with_part(UserPart::text(format!("External prior: {prior_text}")))
        .with_parts(ranked.iter().map(|i| {
            let w = i.source.window();
            UserPart::evidence_ref(
                json!({
                    "id": i.source.to_string(),
                    "kind": format!("{:?}", i.kind).to_lowercase(),
                    "tier": i.tier,
                    "camera": i.source.camera,
                    "start": w.start,
                    "end": w.end,
                    "text": i.text,
                    "label": i.label,
                })
                .to_string(),
            )
        }))
        .with_budget(512)
        .for_question(&q.id)
}

/// One judge call; a local overlap rule answers when the reply is unusable.
pub fn judge(
    q: &Question,
    ranked: &[EvidenceItem],
    outcome: &SearchOutcome,
    prior: Option<&ModelReply>,
    gateway: &Gateway,
) -> AnswerRecord {
    let req = judge_request(q, ranked, outcome, prior);
    let primary = outcome.primary_window.to_string();
    let mut record = AnswerRecord {
        question_id: q.id.clone(),
        choice: "A".into(),
        confidence: 0.0,
        supporting_views: Vec::new(),
        rationale: String::new(),
        ledger_total: 0,
        model_calls: 0,
        pipeline: Pipeline::Sva,
        focus: vec![outcome.primary_window.window()],
        fallback_used: false,
        verification: None,
    };
    match gateway.send_role(&req) {
        Ok(reply) => {
            record.choice = reply.field("choice").and_then(Value::as_str).unwrap_or("A").to_string();
            record.confidence = reply.field("confidence").and_then(Value::as_f64).unwrap_or(0.0);
            record.rationale = reply
                .field("rationale")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            record.supporting_views = views_from_reply(&reply, &primary);
        }
        Err(e) => {
            let (label, conf) = judge_fallback(q, ranked, outcome.tentative_choice.as_deref());
            record.choice = label;
            record.confidence = conf;
            record.rationale = format!("judge unavailable ({e}); chose by tier-weighted evidence overlap");
            record.fallback_used = true;
            let mut seen = BTreeSet::new();
            for i in ranked {
                if seen.insert(i.source.camera.clone()) {
                    record.supporting_views.push(SupportingView {
                        camera: i.source.camera.clone(),
                        window: i.source.to_string(),
                    });
                }
            }
        }
    }
    record
}

pub const PRIOR_SYSTEM: &str = "Reason about the question and choices from general knowledge \
of the recording and give a short reasoning trace. Reply as JSON {\"reasoning\", \"choice\"}.";

/// Runs the whole pipeline for one question.
pub fn answer_question_sva(q: &Question, engine: &Engine, gateway: &Gateway) -> Result<AnswerRecord> {
    gateway.ledger().begin(&q.id);
    let corpus = &engine.corpus;
    let parsed = parse_question(q, &corpus.manifest, &corpus.catalogs, &corpus.lexicons);
    let prior_live = gateway.is_live(RoleTag::Prior);
    let outcome = search(q, &parsed, engine, gateway, prior_live)?;
    let cfg = &engine.config.sva;
    let cams = expansion_cameras(&outcome, engine, cfg.cameras);
    let keys = adjacent_subwindows(&outcome.primary_window, &cams, cfg.span_before, cfg.span_after, engine.manifest());
    let reports = verify_all(&keys, q, engine, gateway);
    let stats = verification_stats(&reports);
    let accepted: Vec<VerifierReport> = reports.into_iter().filter(|r| r.note.is_none() && !r.error).collect();
    let ranked = rank_evidence(&accepted, &outcome.primary_window);
    let prior = if prior_live {
        let req = ModelRequest::new(RoleTag::Prior, PRIOR_SYSTEM, ReplySchema::PriorV1)
            .with_part(question_part(q))
            .with_budget(512)
            .for_question(&q.id);
        gateway.send_role(&req).ok()
    } else {
        None
    };
    let mut record = judge(q, &ranked, &outcome, prior.as_ref(), gateway);
    record.verification = Some(stats);
    record.fallback_used |= outcome.fallback;
    let report = gateway.ledger().report(&q.id)?;
    record.ledger_total = report.total;
    record.model_calls = report.model_calls;
    Ok(record)
}

/// Labels a judge may return.
pub fn is_label(s: &str) -> bool {
    LABELS.contains(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(cam: &str, slot: u32) -> SubWindowKey {
        SubWindowKey {
            camera: cam.into(),
            day: 1,
            slot,
        }
    }

    fn span(id: &str, text: &str) -> (String, EvidenceSpan) {
        (
            id.to_string(),
            EvidenceSpan {
                id: id.into(),
                kind: "transcript".into(),
                camera: "ego1".into(),
                start: 0,
                end: 10,
                text: text.into(),
            },
        )
    }

    fn claim(kind: ClaimKind, text: &str, ids: &[&str]) -> Claim {
        Claim {
            kind,
            text: text.into(),
            evidence_span_ids: ids.iter().map(|s| s.to_string()).collect(),
            localisations: vec![],
            count_value: None,
        }
    }

    fn report(verdict: Verdict, claims: Vec<Claim>) -> VerifierReport {
        VerifierReport {
            subwindow: sub("ego1", 100),
            verdict,
            claims,
            confidence: 0.9,
            note: None,
            error: false,
        }
    }

    #[test]
    fn abstain_rules() {
        let spans = BTreeMap::new();
        let r = report(Verdict::Abstain, vec![]);
        assert_eq!(validate_report(&r, &[], &spans, true, 6), Validation::Accept);
        let r = report(Verdict::Supports("A".into()), vec![claim(ClaimKind::Visual, "x", &["s"])]);
        assert_eq!(validate_report(&r, &[], &spans, true, 6), Validation::Reject(RejectReason::Abstain));
    }

    #[test]
    fn localise_rule() {
        let spans: BTreeMap<_, _> = [span("s1", "three mugs on the table")].into_iter().collect();
        let mut c = claim(ClaimKind::Visual, "3 mugs", &["s1"]);
        c.count_value = Some(3);
        let r = report(Verdict::Supports("C".into()), vec![c.clone()]);
        assert_eq!(validate_report(&r, &[], &spans, false, 6), Validation::Reject(RejectReason::Localise));
        c.localisations.push(Localisation {
            camera: "exo1".into(),
            timestamp: 12.0,
            region: "table-left".into(),
        });
        let r = report(Verdict::Supports("C".into()), vec![c]);
        assert_eq!(validate_report(&r, &[], &spans, false, 6), Validation::Accept);
    }

    #[test]
    fn echo_and_ground_rules() {
        let choice = "she said we should repaint the whole blue fence today".to_string();
        let spans: BTreeMap<_, _> = [span("s1", "mug at table-left"), span("s2", "bob: \"we should repaint the whole blue fence today\"")]
            .into_iter()
            .collect();
        let ctx = vec!["What did Bob propose?".to_string(), choice.clone()];
        let echo = report(Verdict::Supports("A".into()), vec![claim(ClaimKind::AudioQuote, &choice, &["s1"])]);
        assert_eq!(validate_report(&echo, &ctx, &spans, false, 6), Validation::Reject(RejectReason::NoEcho));
        let grounded = report(
            Verdict::Supports("A".into()),
            vec![claim(ClaimKind::AudioQuote, "we should repaint the whole blue fence today", &["s2"])],
        );
        assert_eq!(validate_report(&grounded, &ctx, &spans, false, 6), Validation::Accept);
        let unknown = report(Verdict::Supports("A".into()), vec![claim(ClaimKind::Visual, "x", &["s9"])]);
        assert_eq!(validate_report(&unknown, &ctx, &spans, false, 6), Validation::Reject(RejectReason::Ground));
    }

    #[test]
    fn ocr_outranks_quote() {
        let mut a = report(Verdict::Supports("A".into()), vec![claim(ClaimKind::AudioQuote, "quote", &["s"])]);
        a.subwindow = sub("ego1", 101);
        let mut b = report(Verdict::Supports("B".into()), vec![claim(ClaimKind::Ocr, "sign", &["s"])]);
        b.subwindow = sub("ego2", 104);
        let primary = BucketKey {
            cell: CellKey { day: 1, hour: 8 },
            quarter: 2,
        };
        let ranked = rank_evidence(&[a, b], &primary);
        assert_eq!(ranked[0].kind, ClaimKind::Ocr);
    }

    #[test]
    fn duplicate_quotes_collapse() {
        let a = report(Verdict::Supports("A".into()), vec![claim(ClaimKind::AudioQuote, "Pass the salt!", &["s"])]);
        let mut b = a.clone();
        b.subwindow = sub("exo1", 100);
        b.claims[0].text = "pass the salt".into();
        let primary = BucketKey {
            cell: CellKey { day: 1, hour: 8 },
            quarter: 1,
        };
        assert_eq!(rank_evidence(&[a, b], &primary).len(), 1);
    }

    #[test]
    fn fallback_overlap_and_default() {
        let q = Question::new("q", "What was written on the sign?", ["open late", "closed", "fresh bread daily", "sale"]);
        let item = EvidenceItem {
            tier: 3,
            kind: ClaimKind::Ocr,
            text: "fresh bread daily".into(),
            source: sub("exo1", 100),
            confidence: 1.0,
            dedup_key: "fresh bread daily".into(),
            label: None,
        };
        assert_eq!(judge_fallback(&q, &[item], None).0, "C");
        assert_eq!(judge_fallback(&q, &[], None).0, "A");
        assert_eq!(judge_fallback(&q, &[], Some("D")).0, "D");
    }

    #[test]
    fn reply_round_trip() {
        let mut c = claim(ClaimKind::Visual, "x", &["s"]);
        c.count_value = Some(2);
        let r = report(Verdict::Supports("B".into()), vec![c]);
        let v = r.to_reply();
        ReplySchema::VerifyV1.validate(&v).unwrap();
        assert_eq!(VerifierReport::from_reply(r.subwindow.clone(), &v).unwrap(), r);
    }
}
