//! All model traffic goes through [`Gateway`]: request/reply types, reply
//! schemas, channels (remote, scripted, local rule, disabled), the fallback
//! walker and the per-question call ledger.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, GatewayError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    SearchRerank,
    SearchFinal,
    Verify,
    Prior,
    Judge,
    TmkgAnswer,
    Summarise,
    Parse,
}

impl RoleTag {
    pub const ALL: [RoleTag; 8] = [
        RoleTag::SearchRerank,
        RoleTag::SearchFinal,
        RoleTag::Verify,
        RoleTag::Prior,
        RoleTag::Judge,
        RoleTag::TmkgAnswer,
        RoleTag::Summarise,
        RoleTag::Parse,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoleTag::SearchRerank => "search_rerank",
            RoleTag::SearchFinal => "search_final",
            RoleTag::Verify => "verify",
            RoleTag::Prior => "prior",
            RoleTag::Judge => "judge",
            RoleTag::TmkgAnswer => "tmkg_answer",
            RoleTag::Summarise => "summarise",
            RoleTag::Parse => "parse",
        }
    }

    pub fn parse(s: &str) -> Option<RoleTag> {
        RoleTag::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Registered JSON reply schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplySchema {
    #[serde(rename = "summary_v1")]
    SummaryV1,
    #[serde(rename = "rerank_v1")]
    RerankV1,
    #[serde(rename = "search_final_v1")]
    SearchFinalV1,
    #[serde(rename = "verify_v1")]
    VerifyV1,
    #[serde(rename = "answer_v1")]
    AnswerV1,
    #[serde(rename = "prior_v1")]
    PriorV1,
}

pub const LABELS: [&str; 4] = ["A", "B", "C", "D"];

fn is_label(v: &Value) -> bool {
    v.as_str().is_some_and(|s| LABELS.contains(&s))
}

fn unit_interval(v: &Value) -> bool {
    v.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x))
}

fn string_list(v: &Value) -> bool {
    v.as_array().is_some_and(|a| a.iter().all(Value::is_string))
}

impl ReplySchema {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplySchema::SummaryV1 => "summary_v1",
            ReplySchema::RerankV1 => "rerank_v1",
            ReplySchema::SearchFinalV1 => "search_final_v1",
            ReplySchema::VerifyV1 => "verify_v1",
            ReplySchema::AnswerV1 => "answer_v1",
            ReplySchema::PriorV1 => "prior_v1",
        }
    }

    /// Structural check of a parsed reply.
    pub fn validate(&self, v: &Value) -> std::result::Result<(), String> {
        let obj = v.as_object().ok_or("reply is not a JSON object")?;
        let field = |name: &str| obj.get(name).filter(|x| !x.is_null());
        let require = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(format!("field {name:?} missing or malformed"))
            }
        };
        match self {
            ReplySchema::SummaryV1 => require("summary", field("summary").is_some_and(Value::is_string)),
            ReplySchema::RerankV1 => require("ranking", field("ranking").is_some_and(string_list)),
            ReplySchema::SearchFinalV1 => {
                require("primary", field("primary").is_some_and(Value::is_string))?;
                if let Some(s) = field("supporting") {
                    let ok = s.as_array().is_some_and(|a| {
                        a.iter().all(|x| {
                            x.get("camera").is_some_and(Value::is_string)
                                && x.get("window").is_some_and(Value::is_string)
                        })
                    });
                    require("supporting", ok)?;
                }
                if let Some(t) = field("tentative_choice") {
                    require("tentative_choice", is_label(t))?;
                }
                Ok(())
            }
            ReplySchema::VerifyV1 => {
                let verdict = field("verdict").and_then(Value::as_str);
                require("verdict", matches!(verdict, Some("supports" | "abstain")))?;
                require("confidence", field("confidence").is_some_and(unit_interval))?;
                let claims = match field("claims") {
                    None => Vec::new(),
                    Some(c) => c.as_array().ok_or("field \"claims\" is not a list")?.clone(),
                };
                if verdict == Some("supports") {
                    require("label", field("label").is_some_and(is_label))?;
                    if claims.is_empty() {
                        return Err("a supports verdict needs at least one claim".into());
                    }
                }
                for c in &claims {
                    let kind = c.get("kind").and_then(Value::as_str);
                    require(
                        "claims.kind",
                        matches!(kind, Some("ocr" | "audio_quote" | "visual" | "context")),
                    )?;
                    require("claims.text", c.get("text").is_some_and(Value::is_string))?;
                    let ids_ok = c
                        .get("evidence_span_ids")
                        .is_some_and(|ids| string_list(ids) && !ids.as_array().unwrap().is_empty());
                    require("claims.evidence_span_ids", ids_ok)?;
                    if let Some(locs) = c.get("localisations").filter(|x| !x.is_null()) {
                        let ok = locs.as_array().is_some_and(|a| {
                            a.iter().all(|l| {
                                l.get("camera").is_some_and(Value::is_string)
                                    && l.get("timestamp").is_some_and(Value::is_number)
                                    && l.get("region").is_some_and(Value::is_string)
                            })
                        });
                        require("claims.localisations", ok)?;
                    }
                    if let Some(n) = c.get("count_value").filter(|x| !x.is_null()) {
                        require("claims.count_value", n.is_u64())?;
                    }
                }
                Ok(())
            }
            ReplySchema::AnswerV1 => {
                require("choice", field("choice").is_some_and(is_label))?;
                require("confidence", field("confidence").is_some_and(unit_interval))?;
                if let Some(views) = field("supporting_views") {
                    let ok = views.as_array().is_some_and(|a| {
                        a.iter().all(|x| x.is_string() || x.get("camera").is_some_and(Value::is_string))
                    });
                    require("supporting_views", ok)?;
                }
                if let Some(r) = field("rationale") {
                    require("rationale", r.is_string())?;
                }
                Ok(())
            }
            ReplySchema::PriorV1 => {
                require("reasoning", field("reasoning").is_some_and(Value::is_string))?;
                if let Some(c) = field("choice") {
                    require("choice", is_label(c))?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for ReplySchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Text,
    FrameRef,
    EvidenceRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserPart {
    pub kind: PartKind,
    pub content: String,
}

impl UserPart {
    pub fn text(content: impl Into<String>) -> Self {
        UserPart {
            kind: PartKind::Text,
            content: content.into(),
        }
    }

    pub fn frame_ref(content: impl Into<String>) -> Self {
        UserPart {
            kind: PartKind::FrameRef,
            content: content.into(),
        }
    }

    pub fn evidence_ref(content: impl Into<String>) -> Self {
        UserPart {
            kind: PartKind::EvidenceRef,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role_tag: RoleTag,
    pub system_text: String,
    pub user_parts: Vec<UserPart>,
    pub expected_schema: ReplySchema,
    pub budget: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
}

impl ModelRequest {
    pub fn new(role_tag: RoleTag, system_text: impl Into<String>, expected_schema: ReplySchema) -> Self {
        ModelRequest {
            role_tag,
            system_text: system_text.into(),
            user_parts: Vec::new(),
            expected_schema,
            budget: 512,
            question_id: None,
        }
    }

    pub fn with_part(mut self, part: UserPart) -> Self {
        self.user_parts.push(part);
        self
    }

    pub fn with_parts(mut self, parts: impl IntoIterator<Item = UserPart>) -> Self {
        self.user_parts.extend(parts);
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget as u32;
        self
    }

    pub fn for_question(mut self, id: impl Into<String>) -> Self {
        self.question_id = Some(id.into());
        self
    }

    /// Hex SHA-256 of the canonical JSON of `user_parts`.
    pub fn content_hash(&self) -> String {
        let canon = serde_json::to_vec(&self.user_parts).expect("parts serialize");
        hex::encode(Sha256::digest(&canon))
    }

    pub fn parts_of(&self, kind: PartKind) -> impl Iterator<Item = &str> {
        self.user_parts
            .iter()
            .filter(move |p| p.kind == kind)
            .map(|p| p.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub text: String,
    /// The validated structure; `None` when the text violated the schema.
    pub parsed: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Produced by a local default rule rather than a channel.
    #[serde(default)]
    pub synthetic: bool,
}

impl ModelReply {
    pub fn field(&self, name: &str) -> Option<&Value> {
        self.parsed.as_ref().and_then(|v| v.get(name))
    }
}

/// Strips an optional markdown fence and parses a JSON value.
pub fn parse_reply_json(text: &str) -> std::result::Result<Value, String> {
    let t = text.trim();
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .map(|rest| rest.trim_end().trim_end_matches("```"))
        .unwrap_or(t);
    serde_json::from_str(t.trim()).map_err(|e| format!("reply is not JSON: {e}"))
}

/// A backend able to complete a request with raw reply text.
pub trait Channel: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &ModelRequest) -> std::result::Result<String, GatewayError>;
    /// `false` for channels that will refuse every request.
    fn available(&self) -> bool {
        true
    }
    /// Local rules are logged in the ledger but are not model calls.
    fn is_local(&self) -> bool {
        false
    }
}

/// Refuses every request.
#[derive(Debug, Clone)]
pub struct DisabledChannel {
    id: String,
}

impl DisabledChannel {
    pub fn new(id: impl Into<String>) -> Self {
        DisabledChannel { id: id.into() }
    }
}

impl Channel for DisabledChannel {
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, _req: &ModelRequest) -> std::result::Result<String, GatewayError> {
        Err(GatewayError::Disabled(self.id.clone()))
    }
    fn available(&self) -> bool {
        false
    }
}

type RuleFn = dyn Fn(&ModelRequest) -> Option<Value> + Send + Sync;

/// A deterministic local rule presented as a channel; `None` from the rule
/// counts as a failure.
pub struct LocalRuleChannel {
    id: String,
    rule: Box<RuleFn>,
}

impl LocalRuleChannel {
    pub fn new(id: impl Into<String>, rule: impl Fn(&ModelRequest) -> Option<Value> + Send + Sync + 'static) -> Self {
        LocalRuleChannel {
            id: id.into(),
            rule: Box::new(rule),
        }
    }
}

impl Channel for LocalRuleChannel {
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, req: &ModelRequest) -> std::result::Result<String, GatewayError> {
        (self.rule)(req)
            .map(|v| v.to_string())
            .ok_or_else(|| GatewayError::Http(format!("local rule {} produced no reply", self.id)))
    }
    fn is_local(&self) -> bool {
        true
    }
}

/// What a scripted channel does with a request it has no fixture for.
#[derive(Clone, Default)]
pub enum UnknownKeyPolicy {
    #[default]
    Error,
    Consult(Arc<dyn Channel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub role_tag: RoleTag,
    pub key: String,
    /// Either a raw string or a JSON value that is serialised as the reply text.
    pub reply: Value,
}

/// Replays fixtures keyed by `(role_tag, content hash of user_parts)`.
pub struct ScriptedChannel {
    id: String,
    fixtures: HashMap<(RoleTag, String), String>,
    policy: UnknownKeyPolicy,
}

impl ScriptedChannel {
    pub fn new(id: impl Into<String>, policy: UnknownKeyPolicy) -> Self {
        ScriptedChannel {
            id: id.into(),
            fixtures: HashMap::new(),
            policy,
        }
    }

    pub fn insert(&mut self, req: &ModelRequest, reply: impl Into<String>) {
        self.fixtures
            .insert((req.role_tag, req.content_hash()), reply.into());
    }

    pub fn add_fixture(&mut self, f: Fixture) {
        let text = match f.reply {
            Value::String(s) => s,
            other => other.to_string(),
        };
        self.fixtures.insert((f.role_tag, f.key), text);
    }

    pub fn load(path: impl AsRef<Path>, id: impl Into<String>, policy: UnknownKeyPolicy) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ch = ScriptedChannel::new(id, policy);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Fixture = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            ch.add_fixture(f);
        }
        Ok(ch)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    /// Roles that have at least one fixture.
    pub fn roles(&self) -> BTreeSet<RoleTag> {
        self.fixtures.keys().map(|(r, _)| *r).collect()
    }
}

impl Channel for ScriptedChannel {
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, req: &ModelRequest) -> std::result::Result<String, GatewayError> {
        let key = req.content_hash();
        if let Some(r) = self.fixtures.get(&(req.role_tag, key.clone())) {
            return Ok(r.clone());
        }
        match &self.policy {
            UnknownKeyPolicy::Error => Err(GatewayError::MissingFixture {
                role: req.role_tag.to_string(),
                key,
            }),
            UnknownKeyPolicy::Consult(inner) => inner.complete(req),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Sleep before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            backoff: vec![Duration::from_secs(1), Duration::from_secs(4)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    /// Reads `MODEL_ENDPOINT`, `MODEL_NAME`, `MODEL_API_KEY`, each with an
    /// optional `_<SUFFIX>`. Returns `None` when the endpoint is unset.
    pub fn from_env(suffix: Option<&str>) -> Option<Self> {
        let var = |base: &str| {
            let name = match suffix {
                Some(s) => format!("{base}_{}", s.to_uppercase()),
                None => base.to_string(),
            };
            std::env::var(name).ok().filter(|v| !v.is_empty())
        };
        Some(RemoteConfig {
            endpoint: var("MODEL_ENDPOINT")?,
            model: var("MODEL_NAME").unwrap_or_else(|| "default".into()),
            api_key: var("MODEL_API_KEY"),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        })
    }
}

/// OpenAI-compatible chat-completions client.
pub struct RemoteChannel {
    id: String,
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteChannel {
    pub fn new(id: impl Into<String>, config: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Http(e.to_string()))?;
        Ok(RemoteChannel {
            id: id.into(),
            config,
            client,
        })
    }

    /// The chat-completions body for `req`.
    pub fn wire_body(&self, req: &ModelRequest) -> Value {
        let content: Vec<Value> = req
            .user_parts
            .iter()
            .map(|p| match p.kind {
                PartKind::Text => json!({"type": "text", "text": p.content}),
                PartKind::FrameRef => json!({"type": "image_url", "image_url": {"url": p.content}}),
                PartKind::EvidenceRef => json!({"type": "text", "text": format!("```evidence\n{}\n```", p.content)}),
            })
            .collect();
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": format!("{}\nReply with JSON matching schema {}.", req.system_text, req.expected_schema)},
                {"role": "user", "content": content},
            ],
            "max_tokens": req.budget,
            "response_format": {"type": "json_object"},
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, GatewayError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut rb = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.config.timeout.as_millis() as u64)
            } else {
                GatewayError::Http(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::Http(format!("status {status}")));
        }
        let v: Value = resp.json().map_err(|e| GatewayError::Http(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Http("response has no message content".into()))
    }
}

impl Channel for RemoteChannel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ModelRequest) -> std::result::Result<String, GatewayError> {
        let body = self.wire_body(req);
        let mut last = self.attempt(&body);
        for pause in &self.config.retry.backoff {
            if last.is_ok() {
                break;
            }
            thread::sleep(*pause);
            last = self.attempt(&body);
        }
        last
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub question_id: String,
    pub role_tag: RoleTag,
    pub backend_id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub local: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub question_id: String,
    pub per_role: BTreeMap<RoleTag, usize>,
    /// Every logged attempt, local rules included.
    pub total: usize,
    /// Attempts that went to a model channel.
    pub model_calls: usize,
}

/// Append-only log of every gateway attempt, grouped by question.
#[derive(Debug, Default)]
pub struct CallLedger {
    inner: Mutex<LedgerInner>,
}

#[derive(Debug, Default)]
struct LedgerInner {
    entries: Vec<LedgerEntry>,
    questions: BTreeMap<String, Vec<usize>>,
}

impl CallLedger {
    /// Registers a question so it reports zero calls before any are made.
    pub fn begin(&self, question_id: &str) {
        let mut g = self.inner.lock().unwrap();
        g.questions.entry(question_id.to_string()).or_default();
    }

    pub fn append(&self, entry: LedgerEntry) {
        let mut g = self.inner.lock().unwrap();
        let idx = g.entries.len();
        g.questions.entry(entry.question_id.clone()).or_default().push(idx);
        g.entries.push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.inner.lock().unwrap().entries.clone()
    }

    pub fn entries_for(&self, question_id: &str) -> Vec<LedgerEntry> {
        let g = self.inner.lock().unwrap();
        g.questions
            .get(question_id)
            .map(|ix| ix.iter().map(|i| g.entries[*i].clone()).collect())
            .unwrap_or_default()
    }

    pub fn report(&self, question_id: &str) -> Result<LedgerReport> {
        let g = self.inner.lock().unwrap();
        let ix = g
            .questions
            .get(question_id)
            .ok_or_else(|| Error::UnknownQuestion(question_id.to_string()))?;
        let mut per_role = BTreeMap::new();
        let mut model_calls = 0;
        for i in ix {
            let e = &g.entries[*i];
            *per_role.entry(e.role_tag).or_insert(0) += 1;
            if !e.local {
                model_calls += 1;
            }
        }
        Ok(LedgerReport {
            question_id: question_id.to_string(),
            per_role,
            total: ix.len(),
            model_calls,
        })
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("ledger entries serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn ledger_report(ledger: &CallLedger, question_id: &str) -> Result<LedgerReport> {
    ledger.report(question_id)
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Routes requests to channels by role and logs every attempt.
pub struct Gateway {
    routes: HashMap<RoleTag, Arc<dyn Channel>>,
    alternatives: HashMap<RoleTag, Arc<dyn Channel>>,
    fallback_route: Option<Arc<dyn Channel>>,
    ledger: Arc<CallLedger>,
    limiter: Semaphore,
}

impl Gateway {
    pub fn new(max_in_flight: usize) -> Self {
        Gateway {
            routes: HashMap::new(),
            alternatives: HashMap::new(),
            fallback_route: None,
            ledger: Arc::new(CallLedger::default()),
            limiter: Semaphore::new(max_in_flight),
        }
    }

    /// Every role goes to `channel`.
    pub fn single(channel: Arc<dyn Channel>) -> Self {
        let mut g = Gateway::new(DEFAULT_MAX_IN_FLIGHT);
        g.fallback_route = Some(channel);
        g
    }

    pub fn route(mut self, role: RoleTag, channel: Arc<dyn Channel>) -> Self {
        self.routes.insert(role, channel);
        self
    }

    /// Second channel tried by fallback chains for `role`.
    pub fn with_alternative(mut self, role: RoleTag, channel: Arc<dyn Channel>) -> Self {
        self.alternatives.insert(role, channel);
        self
    }

    pub fn alternative_for(&self, role: RoleTag) -> Option<Arc<dyn Channel>> {
        self.alternatives.get(&role).cloned()
    }

    pub fn with_default_route(mut self, channel: Arc<dyn Channel>) -> Self {
        self.fallback_route = Some(channel);
        self
    }

    pub fn channel_for(&self, role: RoleTag) -> Option<Arc<dyn Channel>> {
        self.routes.get(&role).or(self.fallback_route.as_ref()).cloned()
    }

    /// Whether `role` is routed to a channel that accepts requests.
    pub fn is_live(&self, role: RoleTag) -> bool {
        self.channel_for(role).is_some_and(|c| c.available())
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    /// One round-trip on `channel`, schema-checked and logged.
    pub fn send(&self, req: &ModelRequest, channel: &dyn Channel) -> std::result::Result<ModelReply, GatewayError> {
        let started = Instant::now();
        let raw = {
            let _permit = self.limiter.acquire();
            channel.complete(req)
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let result = raw.and_then(|text| {
            let checked = parse_reply_json(&text).and_then(|v| req.expected_schema.validate(&v).map(|_| v));
            match checked {
                Ok(v) => Ok(ModelReply {
                    text,
                    parsed: Some(v),
                    violation: None,
                    latency_ms,
                    backend_id: channel.id().to_string(),
                    synthetic: false,
                }),
                Err(reason) => Err(GatewayError::SchemaViolation {
                    schema: req.expected_schema.to_string(),
                    reason: reason.clone(),
                    reply: Box::new(ModelReply {
                        text,
                        parsed: None,
                        violation: Some(reason),
                        latency_ms,
                        backend_id: channel.id().to_string(),
                        synthetic: false,
                    }),
                }),
            }
        });
        self.ledger.append(LedgerEntry {
            question_id: req.question_id.clone().unwrap_or_default(),
            role_tag: req.role_tag,
            backend_id: channel.id().to_string(),
            ok: result.is_ok(),
            error: result.as_ref().err().map(|e| e.to_string()),
            local: channel.is_local(),
        });
        result
    }

    /// Sends on the channel routed for the request's role.
    pub fn send_role(&self, req: &ModelRequest) -> std::result::Result<ModelReply, GatewayError> {
        match self.channel_for(req.role_tag) {
            Some(ch) => self.send(req, ch.as_ref()),
            None => {
                let ch = DisabledChannel::new(format!("unrouted:{}", req.role_tag));
                self.send(req, &ch)
            }
        }
    }

    /// Tries `chain` in order and falls back to `default_fn`, whose value is
    /// returned as a synthetic reply. Never fails.
    pub fn run_with_fallback(
        &self,
        req: &ModelRequest,
        chain: &[Arc<dyn Channel>],
        default_fn: impl FnOnce() -> Value,
    ) -> ModelReply {
        for ch in chain {
            match self.send(req, ch.as_ref()) {
                Ok(reply) => return reply,
                Err(e) => log::debug!("channel {} failed for {}: {e}", ch.id(), req.role_tag),
            }
        }
        let value = default_fn();
        let violation = req.expected_schema.validate(&value).err();
        self.ledger.append(LedgerEntry {
            question_id: req.question_id.clone().unwrap_or_default(),
            role_tag: req.role_tag,
            backend_id: "default".into(),
            ok: violation.is_none(),
            error: violation.clone(),
            local: true,
        });
        ModelReply {
            text: value.to_string(),
            parsed: violation.is_none().then_some(value),
            violation,
            latency_ms: 0,
            backend_id: "default".into(),
            synthetic: true,
        }
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(DEFAULT_MAX_IN_FLIGHT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn answer_req() -> ModelRequest {
        ModelRequest::new(RoleTag::Judge, "judge", ReplySchema::AnswerV1)
            .with_part(UserPart::text("question"))
            .for_question("q1")
    }

    struct Fixed(&'static str, &'static str);
    impl Channel for Fixed {
        fn id(&self) -> &str {
            self.0
        }
        fn complete(&self, _req: &ModelRequest) -> std::result::Result<String, GatewayError> {
            Ok(self.1.to_string())
        }
    }

    #[test]
    fn scripted_fixture_reply() {
        let req = answer_req();
        let mut ch = ScriptedChannel::new("scripted", UnknownKeyPolicy::Error);
        ch.insert(&req, r#"{"choice":"B","confidence":0.9}"#);
        let gw = Gateway::single(Arc::new(ch));
        let reply = gw.send_role(&req).unwrap();
        assert_eq!(reply.field("choice").unwrap(), "B");
        let other = answer_req().with_part(UserPart::text("more"));
        assert!(matches!(gw.send_role(&other), Err(GatewayError::MissingFixture { .. })));
        assert_eq!(gw.ledger().report("q1").unwrap().total, 2);
    }

    #[test]
    fn missing_choice_is_schema_violation() {
        let gw = Gateway::single(Arc::new(Fixed("x", r#"{"confidence":0.5}"#)));
        match gw.send_role(&answer_req()) {
            Err(GatewayError::SchemaViolation { reply, .. }) => {
                assert!(reply.parsed.is_none());
                assert!(reply.violation.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fenced_json_accepted() {
        let gw = Gateway::single(Arc::new(Fixed("x", "```json\n{\"choice\":\"C\",\"confidence\":1}\n```")));
        assert_eq!(gw.send_role(&answer_req()).unwrap().field("choice").unwrap(), "C");
    }

    #[test]
    fn fallback_accounting() {
        let gw = Gateway::default();
        let good: Arc<dyn Channel> = Arc::new(Fixed("good", r#"{"choice":"D","confidence":0.7}"#));
        let bad: Arc<dyn Channel> = Arc::new(Fixed("bad", "not json"));
        let off: Arc<dyn Channel> = Arc::new(DisabledChannel::new("off"));

        let r = gw.run_with_fallback(&answer_req().for_question("a"), &[good.clone()], || json!({}));
        assert_eq!(r.backend_id, "good");
        assert_eq!(gw.ledger().report("a").unwrap().total, 1);

        let r = gw.run_with_fallback(&answer_req().for_question("b"), &[off, bad], || {
            json!({"choice": "A", "confidence": 0.0})
        });
        assert!(r.synthetic);
        assert_eq!(r.field("choice").unwrap(), "A");
        let rep = gw.ledger().report("b").unwrap();
        assert_eq!(rep.total, 3);
        assert_eq!(rep.model_calls, 2);
    }

    #[test]
    fn unknown_question() {
        let gw = Gateway::default();
        assert!(matches!(gw.ledger().report("nope"), Err(Error::UnknownQuestion(_))));
        gw.ledger().begin("fresh");
        assert_eq!(gw.ledger().report("fresh").unwrap().total, 0);
    }

    #[test]
    fn verify_schema_rules() {
        let s = ReplySchema::VerifyV1;
        assert!(s.validate(&json!({"verdict": "abstain", "confidence": 0.0, "claims": []})).is_ok());
        assert!(s.validate(&json!({"verdict": "supports", "label": "A", "confidence": 0.9, "claims": []})).is_err());
        let claim = json!({"kind": "ocr", "text": "x", "evidence_span_ids": []});
        assert!(s
            .validate(&json!({"verdict": "supports", "label": "A", "confidence": 0.9, "claims": [claim]}))
            .is_err());
    }

    #[test]
    fn unreachable_endpoint_is_http_error() {
        let cfg = RemoteConfig {
            endpoint: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key: None,
            timeout: Duration::from_secs(2),
            retry: RetryPolicy {
                backoff: vec![Duration::ZERO, Duration::ZERO],
            },
        };
        let ch = RemoteChannel::new("remote", cfg).unwrap();
        let gw = Gateway::default();
        let err = gw.send(&answer_req(), &ch).unwrap_err();
        assert!(matches!(err, GatewayError::Http(_) | GatewayError::Timeout(_)));
    }

    #[test]
    fn remote_round_trip_against_local_server() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read headers, then the declared body length
            loop {
                let n = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf).to_string();
                if let Some(h) = text.find("\r\n\r\n") {
                    let len = text[..h]
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= h + 4 + len {
                        break;
                    }
                }
            }
            let request = String::from_utf8_lossy(&buf).to_string();
            let content = r#"{\"choice\":\"B\",\"confidence\":0.8}"#;
            let body = format!(r#"{{"choices":[{{"message":{{"content":"{content}"}}}}]}}"#);
            write!(
                sock,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            request
        });
        let cfg = RemoteConfig {
            endpoint: format!("http://{addr}"),
            model: "judge-model".into(),
            api_key: Some("secret".into()),
            timeout: Duration::from_secs(5),
            retry: RetryPolicy { backoff: vec![] },
        };
        let ch = RemoteChannel::new("remote", cfg).unwrap();
        let req = answer_req().with_part(UserPart::frame_ref("data:image/png;base64,AAAA"));
        let reply = Gateway::default().send(&req, &ch).unwrap();
        assert_eq!(reply.field("choice").unwrap(), "B");
        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /chat/completions"));
        assert!(seen.to_lowercase().contains("authorization: bearer secret"));
        assert!(seen.contains("image_url"));
        assert!(seen.contains("judge-model"));
    }
}
