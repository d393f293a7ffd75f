//! Synthetic corpus and question generator with planted ground truth, the
//! oracle backend and the accuracy evaluator.

pub mod eval;
pub mod oracle;
pub mod questions;
pub mod run;
pub mod synth;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("not enough happenings for {needed} {intent} questions (found {available})")]
    InsufficientEvents {
        intent: String,
        needed: usize,
        available: usize,
    },

    #[error("answer and question ids differ: missing {missing:?}, unexpected {unexpected:?}")]
    IdMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error(transparent)]
    Core(#[from] vidqa_core::Error),
}
