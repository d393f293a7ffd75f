//! Wiring for end-to-end runs over a generated world.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use vidqa_core::engine::{AnswerRecord, Engine, EngineConfig, Pipeline};
use vidqa_core::gateway::{Channel, Fixture, Gateway, ModelRequest, RoleTag};
use vidqa_core::GatewayError;
use vidqa_core::query::Question;
use vidqa_core::sva::answer_question_sva;
use vidqa_core::tmkg::answer_question_tmkg;

use crate::eval::HarnessTruth;
use crate::oracle::OracleChannel;
use crate::questions::{generate_questions, IntentMix, QuestionSet};
use crate::synth::{generate_corpus, GroundTruthScript, SynthConfig};
use crate::BenchError;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_QUESTIONS: usize = 100;

/// Roles the oracle answers.
pub const ORACLE_ROLES: [RoleTag; 5] = [
    RoleTag::SearchRerank,
    RoleTag::SearchFinal,
    RoleTag::Verify,
    RoleTag::Judge,
    RoleTag::TmkgAnswer,
];

pub struct Harness {
    pub engine: Engine,
    pub script: Arc<GroundTruthScript>,
    pub set: QuestionSet,
}

impl Harness {
    pub fn build(
        seed: u64,
        synth: &SynthConfig,
        questions: usize,
        mix: &IntentMix,
        config: EngineConfig,
    ) -> Result<Self, BenchError> {
        let (corpus, script) = generate_corpus(seed, synth)?;
        let set = generate_questions(&script, questions, mix)?;
        let engine = Engine::build(corpus, config)?;
        Ok(Harness {
            engine,
            script: Arc::new(script),
            set,
        })
    }

    /// Seed 42, default world, 100 questions.
    pub fn default_desk() -> Result<Self, BenchError> {
        Harness::build(
            DEFAULT_SEED,
            &SynthConfig::default(),
            DEFAULT_QUESTIONS,
            &IntentMix::default(),
            EngineConfig::default(),
        )
    }

    pub fn oracle(&self) -> OracleChannel {
        OracleChannel::new(self.script.clone(), &self.set)
    }

    pub fn truth(&self) -> HarnessTruth {
        HarnessTruth {
            script: (*self.script).clone(),
            targets: self.set.targets.clone(),
        }
    }
}

pub fn oracle_gateway(channel: Arc<dyn Channel>) -> Gateway {
    ORACLE_ROLES
        .iter()
        .fold(Gateway::default(), |g, r| g.route(*r, channel.clone()))
}

pub fn answer_question(q: &Question, engine: &Engine, gateway: &Gateway, pipeline: Pipeline) -> vidqa_core::Result<AnswerRecord> {
    match pipeline {
        Pipeline::Sva => answer_question_sva(q, engine, gateway),
        Pipeline::Tmkg => answer_question_tmkg(q, engine, gateway),
    }
}

/// Answers every question in parallel; results follow `questions`.
pub fn answer_all(
    questions: &[Question],
    engine: &Engine,
    gateway: &Gateway,
    pipeline: Pipeline,
) -> Vec<vidqa_core::Result<AnswerRecord>> {
    questions
        .par_iter()
        .map(|q| answer_question(q, engine, gateway, pipeline))
        .collect()
}

/// Passes requests through to `inner` and keeps every successful reply as a
/// scripted fixture.
pub struct RecordingChannel {
    inner: Arc<dyn Channel>,
    log: Mutex<Vec<Fixture>>,
}

impl RecordingChannel {
    pub fn new(inner: Arc<dyn Channel>) -> Self {
        RecordingChannel {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Recorded fixtures sorted by role and key, one per key.
    pub fn fixtures(&self) -> Vec<Fixture> {
        let mut f = self.log.lock().unwrap().clone();
        f.sort_by(|a, b| (a.role_tag, &a.key).cmp(&(b.role_tag, &b.key)));
        f.dedup_by(|a, b| a.role_tag == b.role_tag && a.key == b.key);
        f
    }

    pub fn write(&self, path: impl AsRef<Path>) -> vidqa_core::Result<()> {
        let path = path.as_ref();
        let body: String = self
            .fixtures()
            .iter()
            .map(|f| serde_json::to_string(f).expect("fixtures serialize") + "\n")
            .collect();
        fs::write(path, body).map_err(|e| vidqa_core::Error::io(path, e))
    }
}

impl Channel for RecordingChannel {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &ModelRequest) -> Result<String, GatewayError> {
        let reply = self.inner.complete(req)?;
        self.log.lock().unwrap().push(Fixture {
            role_tag: req.role_tag,
            key: req.content_hash(),
            reply: serde_json::Value::String(reply.clone()),
        });
        Ok(reply)
    }

    fn available(&self) -> bool {
        self.inner.available()
    }
}
