//! Deterministic stand-in for the remote models that answers from the
//! ground-truth script, with optional noise and confabulation injection.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use vidqa_core::cells::{BucketKey, DocKey};
use vidqa_core::gateway::{Channel, ModelRequest, PartKind, RoleTag, LABELS};
use vidqa_core::lane::TimeWindow;
use vidqa_core::query::Question;
use vidqa_core::sva::EvidenceSpan;
use vidqa_core::GatewayError;

use crate::questions::{QuestionKind, QuestionSet, QuestionTarget};
use crate::synth::{GroundTruthScript, Happening, COUNTABLES};

/// Adversarial verify replies that the output rules must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Quotes the question back as if it were heard in the clip.
    Echo,
    /// Supports an answer on a clip with no evidence.
    AssertOnEmpty,
    /// Reports a count without saying where the counted items are.
    UngroundedCount,
}

impl Injection {
    pub const ALL: [Injection; 3] = [Injection::Echo, Injection::AssertOnEmpty, Injection::UngroundedCount];
}

pub struct OracleChannel {
    id: String,
    script: Arc<GroundTruthScript>,
    questions: BTreeMap<String, (Question, QuestionTarget)>,
    noise: f64,
    noise_seed: u64,
    injection: Option<Injection>,
}

/// Parses `frame://camera/start-end`.
pub fn parse_frame_ref(s: &str) -> Option<(String, TimeWindow)> {
    let rest = s.strip_prefix("frame://")?;
    let (cam, range) = rest.split_once('/')?;
    let (a, b) = range.split_once('-')?;
    Some((
        cam.to_string(),
        TimeWindow {
            start: a.parse().ok()?,
            end: b.parse().ok()?,
        },
    ))
}

fn hash64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl OracleChannel {
    pub fn new(script: Arc<GroundTruthScript>, set: &QuestionSet) -> Self {
        let questions = set
            .questions
            .iter()
            .filter_map(|q| set.targets.get(&q.id).map(|t| (q.id.clone(), (q.clone(), *t))))
            .collect();
        OracleChannel {
            id: "oracle".into(),
            script,
            questions,
            noise: 0.0,
            noise_seed: 0,
            injection: None,
        }
    }

    /// Confabulates on `rate` of the windows that do not show the answer.
    pub fn with_noise(mut self, rate: f64, seed: u64) -> Self {
        self.noise = rate;
        self.noise_seed = seed;
        self
    }

    pub fn with_injection(mut self, injection: Injection) -> Self {
        self.injection = Some(injection);
        self
    }

    fn flipped(&self, qid: &str, camera: &str, start: u64) -> bool {
        if self.noise <= 0.0 {
            return false;
        }
        let h = hash64(&[&self.noise_seed.to_string(), qid, camera, &start.to_string()]);
        (h as f64 / u64::MAX as f64) < self.noise
    }

    fn wrong_label(&self, qid: &str, gold: &str, salt: &str) -> &'static str {
        let wrong: Vec<&'static str> = LABELS.iter().copied().filter(|l| *l != gold).collect();
        wrong[(hash64(&[qid, salt, "wrong"]) % wrong.len() as u64) as usize]
    }

    fn rerank(&self, req: &ModelRequest, anchor: &Happening, ev: &Happening) -> Value {
        let ids: Vec<String> = req
            .parts_of(PartKind::EvidenceRef)
            .filter_map(|p| serde_json::from_str::<Value>(p).ok())
            .filter_map(|v| v["id"].as_str().map(str::to_string))
            .collect();
        let hit = |id: &String| {
            id.parse::<DocKey>()
                .is_ok_and(|k| k.window().overlaps(&anchor.window) || k.window().overlaps(&ev.window))
        };
        let mut ranking: Vec<&String> = ids.iter().filter(|i| hit(i)).collect();
        ranking.extend(ids.iter().filter(|i| !hit(i)));
        json!({ "ranking": ranking })
    }

    fn pick(&self, req: &ModelRequest, anchor: &Happening, ev: &Happening, gold: &str) -> Value {
        let ids: Vec<BucketKey> = req
            .parts_of(PartKind::EvidenceRef)
            .filter_map(|p| serde_json::from_str::<Value>(p).ok())
            .filter_map(|v| v["id"].as_str()?.parse().ok())
            .collect();
        let primary = ids
            .iter()
            .find(|b| **b == anchor.bucket())
            .or_else(|| ids.iter().find(|b| **b == ev.bucket()))
            .or(ids.first());
        let mut supporting: Vec<Value> = Vec::new();
        for h in [ev, anchor] {
            for c in &h.cameras {
                if !supporting.iter().any(|s| s["camera"] == *c) {
                    supporting.push(json!({"camera": c, "window": h.bucket().to_string()}));
                }
            }
        }
        json!({
            "primary": primary.map(|b| b.to_string()),
            "supporting": supporting,
            "tentative_choice": gold,
        })
    }

    fn grounded_claims(&self, kind: QuestionKind, ev: &Happening, spans: &[EvidenceSpan]) -> Vec<Value> {
        let find = |pred: &dyn Fn(&EvidenceSpan) -> bool| spans.iter().find(|s| pred(s));
        let claim = match kind {
            QuestionKind::Quote => ev.utterances.first().and_then(|u| {
                find(&|s| s.kind == "transcript" && s.text.contains(&u.text))
                    .map(|s| json!({"kind": "audio_quote", "text": u.text, "evidence_span_ids": [s.id]}))
            }),
            QuestionKind::Sign => ev.on_screen_text.as_ref().and_then(|sign| {
                find(&|s| s.kind == "ocr" && s.text.contains(sign.as_str()))
                    .map(|s| json!({"kind": "ocr", "text": sign, "evidence_span_ids": [s.id]}))
            }),
            QuestionKind::Count => {
                let prefix = format!("{} at ", ev.count_object);
                let items: Vec<&EvidenceSpan> = spans
                    .iter()
                    .filter(|s| s.kind == "object" && s.text.starts_with(&prefix))
                    .collect();
                let plural = COUNTABLES
                    .iter()
                    .find(|(n, _)| *n == ev.count_object)
                    .map_or(ev.count_object.as_str(), |(_, p)| *p);
                (!items.is_empty()).then(|| {
                    json!({
                        "kind": "visual",
                        "text": format!("{} {plural} visible", items.len()),
                        "evidence_span_ids": items.iter().map(|s| &s.id).collect::<Vec<_>>(),
                        "localisations": items.iter().map(|s| json!({
                            "camera": s.camera,
                            "timestamp": s.start as f64,
                            "region": &s.text[prefix.len()..],
                        })).collect::<Vec<_>>(),
                        "count_value": items.len(),
                    })
                })
            }
            _ => None,
        };
        let scene = find(&|s| s.kind == "caption:scene_300s" && s.text.contains(&ev.anchor))
            .or_else(|| spans.first())
            .map(|s| json!({"kind": "visual", "text": s.text, "evidence_span_ids": [s.id]}));
        claim.into_iter().chain(scene).collect()
    }

    fn verify(&self, req: &ModelRequest, q: &Question, t: &QuestionTarget, gold: &str) -> Value {
        let spans: Vec<EvidenceSpan> = req
            .parts_of(PartKind::EvidenceRef)
            .filter_map(|p| serde_json::from_str(p).ok())
            .collect();
        let frame = req.parts_of(PartKind::FrameRef).find_map(parse_frame_ref);
        let ev = self.script.happening(t.evidence);
        let first_id = spans.first().map(|s| s.id.clone());
        if let Some(inj) = self.injection {
            let claim = match inj {
                Injection::Echo => {
                    let cite = spans
                        .iter()
                        .find(|s| s.kind == "identity")
                        .map(|s| s.id.clone())
                        .or(first_id)
                        .unwrap_or_else(|| "unseen#0".into());
                    json!({"kind": "audio_quote", "text": q.text, "evidence_span_ids": [cite]})
                }
                Injection::AssertOnEmpty => json!({
                    "kind": "visual",
                    "text": format!("the {} is clearly handled here", ev.anchor),
                    "evidence_span_ids": [first_id.unwrap_or_else(|| "unseen#0".into())],
                }),
                Injection::UngroundedCount => json!({
                    "kind": "visual",
                    "text": format!("{} items are visible", ev.count),
                    "evidence_span_ids": [first_id.unwrap_or_else(|| "unseen#0".into())],
                    "count_value": ev.count,
                }),
            };
            return json!({"verdict": "supports", "label": gold, "claims": [claim], "confidence": 0.9});
        }
        let Some((cam, window)) = frame else {
            return json!({"verdict": "abstain", "label": null, "claims": [], "confidence": 0.5});
        };
        if ev.visible_in(&cam, &window) && !spans.is_empty() {
            let claims = self.grounded_claims(t.kind, ev, &spans);
            return json!({"verdict": "supports", "label": gold, "claims": claims, "confidence": 0.9});
        }
        if self.flipped(&q.id, &cam, window.start) {
            let label = self.wrong_label(&q.id, gold, &format!("{cam}{}", window.start));
            let text = q.choice(label).unwrap_or_default();
            return json!({
                "verdict": "supports",
                "label": label,
                "claims": [{"kind": "visual", "text": text, "evidence_span_ids": [format!("{cam}@{}#unseen", window.start)]}],
                "confidence": 0.8,
            });
        }
        json!({"verdict": "abstain", "label": null, "claims": [], "confidence": 0.9})
    }

    fn answer(&self, req: &ModelRequest, q: &Question, t: &QuestionTarget, gold: &str) -> Value {
        let ev = self.script.happening(t.evidence);
        let mut windows: Vec<(String, TimeWindow)> = req.parts_of(PartKind::FrameRef).filter_map(parse_frame_ref).collect();
        for p in req.parts_of(PartKind::EvidenceRef) {
            let Ok(v) = serde_json::from_str::<Value>(p) else { continue };
            if let (Some(c), Some(s), Some(e)) = (v["camera"].as_str(), v["start"].as_u64(), v["end"].as_u64()) {
                windows.push((c.to_string(), TimeWindow { start: s, end: e }));
            }
        }
        let on_target: Vec<&(String, TimeWindow)> = windows.iter().filter(|(c, w)| ev.visible_in(c, w)).collect();
        let flipped = windows
            .iter()
            .any(|(c, w)| !ev.visible_in(c, w) && self.flipped(&q.id, c, w.start));
        if flipped {
            let label = self.wrong_label(&q.id, gold, "answer");
            return json!({
                "choice": label,
                "confidence": 0.8,
                "supporting_views": [],
                "rationale": "misled by an unrelated clip",
            });
        }
        if !on_target.is_empty() {
            let mut views: Vec<Value> = Vec::new();
            for (c, w) in on_target {
                let v = json!({"camera": c, "window": BucketKey::containing(w.start).to_string()});
                if !views.contains(&v) {
                    views.push(v);
                }
            }
            return json!({
                "choice": gold,
                "confidence": 0.95,
                "supporting_views": views,
                "rationale": "the supplied evidence shows the answer",
            });
        }
        let label = LABELS[(hash64(&[&q.id, "weak"]) % 4) as usize];
        json!({
            "choice": label,
            "confidence": 0.25,
            "supporting_views": [],
            "rationale": "evidence does not settle the question",
        })
    }
}

impl Channel for OracleChannel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ModelRequest) -> Result<String, GatewayError> {
        let qid = req
            .question_id
            .as_deref()
            .ok_or_else(|| GatewayError::Http("oracle needs a question id".into()))?;
        let (q, t) = self
            .questions
            .get(qid)
            .ok_or_else(|| GatewayError::Http(format!("oracle has no question {qid}")))?;
        let gold = q.answer.as_deref().unwrap_or("A");
        let anchor = self.script.happening(t.anchor);
        let ev = self.script.happening(t.evidence);
        let reply = match req.role_tag {
            RoleTag::SearchRerank => self.rerank(req, anchor, ev),
            RoleTag::SearchFinal => self.pick(req, anchor, ev, gold),
            RoleTag::Verify => self.verify(req, q, t, gold),
            RoleTag::Judge | RoleTag::TmkgAnswer => self.answer(req, q, t, gold),
            other => return Err(GatewayError::Http(format!("oracle does not serve {other}"))),
        };
        Ok(reply.to_string())
    }
}
