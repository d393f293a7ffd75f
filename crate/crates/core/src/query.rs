//! Rule-based parsing of a four-choice question into retrieval constraints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::LABELS;
use crate::lane::{CorpusManifest, Person};
use crate::text::{tokenize, verb_forms};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub choices: Vec<Choice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>, choices: [&str; 4]) -> Self {
        Question {
            id: id.into(),
            text: text.into(),
            choices: LABELS
                .iter()
                .zip(choices)
                .map(|(l, t)| Choice {
                    label: l.to_string(),
                    text: t.to_string(),
                })
                .collect(),
            answer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.choices.len() != 4 {
            return Err(Error::Validation(format!(
                "question {} has {} choices",
                self.id,
                self.choices.len()
            )));
        }
        let labels: BTreeSet<&str> = self.choices.iter().map(|c| c.label.as_str()).collect();
        if labels != LABELS.iter().copied().collect() {
            return Err(Error::Validation(format!("question {} must use labels A-D", self.id)));
        }
        if let Some(a) = &self.answer {
            if !LABELS.contains(&a.as_str()) {
                return Err(Error::Validation(format!("question {} has gold label {a:?}", self.id)));
            }
        }
        Ok(())
    }

    pub fn choice(&self, label: &str) -> Option<&str> {
        self.choices.iter().find(|c| c.label == label).map(|c| c.text.as_str())
    }
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        q.validate()?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_questions(path: impl AsRef<Path>, questions: &[Question]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for q in questions {
        out.push_str(&serde_json::to_string(q).expect("questions serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Who,
    Where,
    When,
    What,
    Count,
    OrderBeforeAfter,
    Other,
}

impl Intent {
    pub const ALL: [Intent; 7] = [
        Intent::Who,
        Intent::Where,
        Intent::When,
        Intent::What,
        Intent::Count,
        Intent::OrderBeforeAfter,
        Intent::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Intent::Who => "who",
            Intent::Where => "where",
            Intent::When => "when",
            Intent::What => "what",
            Intent::Count => "count",
            Intent::OrderBeforeAfter => "order_before_after",
            Intent::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Before,
    After,
}

/// Entity vocabularies. Persons come from the manifest roster.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalogs {
    #[serde(default)]
    pub persons: Vec<Person>,
    #[serde(default)]
    pub places: Vec<String>,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub actions: Vec<String>,
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

impl Catalogs {
    /// Reads `places.json`, `objects.json` and `actions.json` (plain JSON
    /// lists) from `dir`; missing files give empty lists.
    pub fn load_dir(dir: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Catalogs {
            persons: manifest.roster.clone(),
            places: read_list(&dir.join("places.json"))?,
            objects: read_list(&dir.join("objects.json"))?,
            actions: read_list(&dir.join("actions.json"))?,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, list) in [
            ("places.json", &self.places),
            ("objects.json", &self.objects),
            ("actions.json", &self.actions),
        ] {
            let path = dir.join(name);
            let body = serde_json::to_string_pretty(list).expect("lists serialize");
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn person_by_token(&self, token: &str) -> Option<&Person> {
        self.persons
            .iter()
            .find(|p| p.id.eq_ignore_ascii_case(token) || p.name.eq_ignore_ascii_case(token))
    }
}

/// Minutes-of-day interval, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteRange {
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    /// Daypart name to `[start, end)` in minutes of day.
    pub dayparts: BTreeMap<String, (u32, u32)>,
    /// Ordinal words ("first", "one") to day numbers.
    pub day_names: BTreeMap<String, u32>,
    /// Leading question words and the intent they select.
    pub intent_keywords: BTreeMap<String, Intent>,
}

impl Default for Lexicons {
    fn default() -> Self {
        let dayparts = [
            ("morning", (6 * 60, 12 * 60)),
            ("noon", (12 * 60, 13 * 60)),
            ("afternoon", (12 * 60, 18 * 60)),
            ("evening", (18 * 60, 22 * 60)),
            ("night", (22 * 60, 24 * 60)),
        ];
        let day_names = [
            ("first", 1),
            ("second", 2),
            ("third", 3),
            ("fourth", 4),
            ("fifth", 5),
            ("one", 1),
            ("two", 2),
            ("three", 3),
            ("four", 4),
            ("five", 5),
        ];
        let intents = [
            ("who", Intent::Who),
            ("whom", Intent::Who),
            ("whose", Intent::Who),
            ("where", Intent::Where),
            ("when", Intent::When),
            ("what", Intent::What),
            ("which", Intent::What),
        ];
        Lexicons {
            dayparts: dayparts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            day_names: day_names.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            intent_keywords: intents.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

impl Lexicons {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub day: Option<u32>,
    pub time_range: Option<MinuteRange>,
    pub persons: BTreeSet<String>,
    pub places: BTreeSet<String>,
    pub objects: BTreeSet<String>,
    pub actions: BTreeSet<String>,
    pub intent: Intent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    pub raw: String,
}

impl ParsedQuery {
    pub fn has_relational_constraints(&self) -> bool {
        !(self.persons.is_empty() && self.places.is_empty() && self.objects.is_empty())
    }
}

/// Finds catalog phrases in `tokens`, preferring the longest phrase at each
/// position and never letting two matches overlap.
fn longest_matches(tokens: &[String], phrases: &[(Vec<String>, String)]) -> Vec<String> {
    let mut found = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let best = phrases
            .iter()
            .filter(|(p, _)| !p.is_empty() && tokens[i..].starts_with(p))
            .max_by_key(|(p, _)| p.len());
        match best {
            Some((p, canonical)) => {
                found.push(canonical.clone());
                i += p.len();
            }
            None => i += 1,
        }
    }
    found
}

fn clock_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(\d{1,2}):(\d{2})\s*(am|pm)?\b").unwrap())
}

fn day_num_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bday\s+(\d+)\b").unwrap())
}

fn to_minutes(h: u32, m: u32, meridiem: Option<&str>) -> Option<u32> {
    let h = match meridiem.map(str::to_lowercase).as_deref() {
        Some("am") if h == 12 => 0,
        Some("pm") if h < 12 => h + 12,
        _ => h,
    };
    (h < 24 && m < 60).then_some(h * 60 + m)
}

fn parse_day(text: &str, tokens: &[String], lex: &Lexicons, manifest: &CorpusManifest) -> Option<u32> {
    let day = day_num_re()
        .captures(text)
        .and_then(|c| c[1].parse::<u32>().ok())
        .or_else(|| {
            tokens.windows(2).find_map(|w| match (w[0].as_str(), w[1].as_str()) {
                (ord, "day") => lex.day_names.get(ord).copied(),
                ("day", ord) => lex.day_names.get(ord).copied(),
                _ => None,
            })
        })?;
    (1..=manifest.days).contains(&day).then_some(day)
}

fn parse_time(text: &str, tokens: &[String], lex: &Lexicons) -> Option<MinuteRange> {
    let clocks: Vec<u32> = clock_re()
        .captures_iter(text)
        .filter_map(|c| {
            to_minutes(
                c[1].parse().ok()?,
                c[2].parse().ok()?,
                c.get(3).map(|m| m.as_str()),
            )
        })
        .collect();
    match clocks.as_slice() {
        [t] => return Some(MinuteRange { start: *t, end: *t }),
        [a, b, ..] => {
            return Some(MinuteRange {
                start: *a.min(b),
                end: *a.max(b),
            })
        }
        [] => {}
    }
    tokens.iter().find_map(|t| {
        lex.dayparts.get(t).map(|(s, e)| MinuteRange {
            start: *s,
            end: e.saturating_sub(1),
        })
    })
}

fn parse_intent(tokens: &[String], lex: &Lexicons) -> (Intent, Option<Direction>) {
    for w in tokens.windows(2) {
        if w[0] == "immediately" {
            match w[1].as_str() {
                "before" => return (Intent::OrderBeforeAfter, Some(Direction::Before)),
                "after" => return (Intent::OrderBeforeAfter, Some(Direction::After)),
                _ => {}
            }
        }
    }
    if tokens.windows(2).any(|w| w[0] == "how" && w[1] == "many") {
        return (Intent::Count, None);
    }
    let lead = tokens
        .first()
        .and_then(|t| lex.intent_keywords.get(t))
        .copied()
        .unwrap_or(Intent::Other);
    (lead, None)
}

/// Intent and order direction of a question text alone.
pub fn detect_intent(text: &str, lexicons: &Lexicons) -> (Intent, Option<Direction>) {
    parse_intent(&tokenize(text), lexicons)
}

/// Extracts day, time, entities and intent. Entities are looked up in the
/// question and all choices; day and time only in the question text.
pub fn parse_question(
    q: &Question,
    manifest: &CorpusManifest,
    catalogs: &Catalogs,
    lexicons: &Lexicons,
) -> ParsedQuery {
    let q_tokens = tokenize(&q.text);
    let mut texts = vec![q.text.as_str()];
    texts.extend(q.choices.iter().map(|c| c.text.as_str()));

    let phrase_list = |items: &[String]| -> Vec<(Vec<String>, String)> {
        items.iter().map(|s| (tokenize(s), s.to_lowercase())).collect()
    };
    let places = phrase_list(&catalogs.places);
    let mut objects = phrase_list(&catalogs.objects);
    // plural of the head noun: "mugs", "boxes"
    for (toks, canonical) in phrase_list(&catalogs.objects) {
        if let Some((head, rest)) = toks.split_last() {
            let plural = if head.ends_with('s') || head.ends_with('x') || head.ends_with("ch") || head.ends_with("sh") {
                format!("{head}es")
            } else {
                format!("{head}s")
            };
            let mut p = rest.to_vec();
            p.push(plural);
            objects.push((p, canonical));
        }
    }
    let mut persons: Vec<(Vec<String>, String)> = Vec::new();
    for p in &catalogs.persons {
        persons.push((tokenize(&p.id), p.id.clone()));
        persons.push((tokenize(&p.name), p.id.clone()));
    }
    let mut actions: Vec<(Vec<String>, String)> = Vec::new();
    for a in &catalogs.actions {
        let toks = tokenize(a);
        if let [single] = toks.as_slice() {
            for f in verb_forms(single) {
                actions.push((vec![f], a.to_lowercase()));
            }
        } else {
            actions.push((toks, a.to_lowercase()));
        }
    }

    let mut parsed = ParsedQuery {
        day: parse_day(&q.text, &q_tokens, lexicons, manifest),
        time_range: parse_time(&q.text, &q_tokens, lexicons),
        persons: BTreeSet::new(),
        places: BTreeSet::new(),
        objects: BTreeSet::new(),
        actions: BTreeSet::new(),
        intent: Intent::Other,
        direction: None,
        raw: q.text.clone(),
    };
    for t in texts {
        let toks = tokenize(t);
        parsed.persons.extend(longest_matches(&toks, &persons));
        parsed.places.extend(longest_matches(&toks, &places));
        parsed.objects.extend(longest_matches(&toks, &objects));
        parsed.actions.extend(longest_matches(&toks, &actions));
    }
    let (intent, direction) = parse_intent(&q_tokens, lexicons);
    parsed.intent = intent;
    parsed.direction = direction;
    parsed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lane::{CameraInfo, CameraKind, DaySpan};

    fn manifest() -> CorpusManifest {
        CorpusManifest {
            days: 4,
            epoch: 0,
            day_span: DaySpan {
                start: 8 * 3600,
                end: 20 * 3600,
            },
            day_spans: vec![],
            cameras: vec![CameraInfo {
                id: "exo1".into(),
                kind: CameraKind::Exo,
                wearer: None,
            }],
            roster: vec![
                Person {
                    id: "alice".into(),
                    name: "Alice".into(),
                },
                Person {
                    id: "bob".into(),
                    name: "Bob".into(),
                },
            ],
            embedding_dim: 4,
        }
    }

    fn catalogs() -> Catalogs {
        Catalogs {
            persons: manifest().roster,
            places: vec!["kitchen".into(), "living room".into()],
            objects: vec!["board game".into(), "board".into(), "mug".into()],
            actions: vec!["set the table".into(), "chop".into()],
        }
    }

    #[test]
    fn who_with_day_and_time() {
        let q = Question::new("q", "Who set the table on day 2 at 18:30?", ["Alice", "Bob", "Carol", "Dave"]);
        let p = parse_question(&q, &manifest(), &catalogs(), &Lexicons::default());
        assert_eq!(p.day, Some(2));
        assert_eq!(p.time_range, Some(MinuteRange { start: 1110, end: 1110 }));
        assert_eq!(p.intent, Intent::Who);
        assert!(p.actions.contains("set the table"));
        // names in the choices are extracted too
        assert_eq!(p.persons, ["alice", "bob"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn immediately_before_wins() {
        let q = Question::new(
            "q",
            "What did Alice do immediately before the board game?",
            ["x", "y", "z", "w"],
        );
        let p = parse_question(&q, &manifest(), &catalogs(), &Lexicons::default());
        assert_eq!(p.intent, Intent::OrderBeforeAfter);
        assert_eq!(p.direction, Some(Direction::Before));
        assert!(p.persons.contains("alice"));
        assert!(p.objects.contains("board game"));
        assert!(!p.objects.contains("board"));
    }

    #[test]
    fn empty_question() {
        let q = Question::new("q", "", ["", "", "", ""]);
        let p = parse_question(&q, &manifest(), &catalogs(), &Lexicons::default());
        assert_eq!(p.intent, Intent::Other);
        assert!(p.day.is_none() && p.time_range.is_none());
        assert!(p.persons.is_empty() && p.objects.is_empty());
    }

    #[test]
    fn count_and_inflected_verbs() {
        let q = Question::new("q", "How many mugs did Bob use while chopping?", ["1", "2", "3", "4"]);
        let p = parse_question(&q, &manifest(), &catalogs(), &Lexicons::default());
        assert_eq!(p.intent, Intent::Count);
        assert!(p.actions.contains("chop"));
        assert_eq!(p.objects, ["mug".to_string()].into_iter().collect());
    }

    #[test]
    fn day_out_of_range_and_daypart() {
        let q = Question::new("q", "Where was Bob on day 9 in the morning?", ["a", "b", "c", "d"]);
        let p = parse_question(&q, &manifest(), &catalogs(), &Lexicons::default());
        assert_eq!(p.day, None);
        assert_eq!(p.time_range, Some(MinuteRange { start: 360, end: 719 }));
        assert_eq!(p.intent, Intent::Where);
    }

    #[test]
    fn question_validation() {
        let mut q = Question::new("q", "x", ["a", "b", "c", "d"]);
        assert!(q.validate().is_ok());
        q.choices.pop();
        assert!(q.validate().is_err());
    }
}
