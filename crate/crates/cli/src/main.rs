use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use vidqa_bench::eval::{evaluate, HarnessTruth};
use vidqa_bench::oracle::OracleChannel;
use vidqa_bench::questions::{generate_questions, IntentMix, QuestionSet};
use vidqa_bench::run::{answer_all, oracle_gateway, RecordingChannel, DEFAULT_QUESTIONS};
use vidqa_bench::synth::{generate_corpus, SynthConfig};
use vidqa_core::engine::{load_answers, write_answers, Corpus, Engine, EngineConfig, Pipeline};
use vidqa_core::gateway::{Channel, DisabledChannel, Gateway, RemoteChannel, RemoteConfig, ScriptedChannel, UnknownKeyPolicy};
use vidqa_core::query::{load_questions, write_questions};

#[derive(Parser)]
#[command(name = "vidqa", version, about = "Multi-camera video question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Sva,
    Tmkg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Ground-truth oracle; needs truth.json next to the corpus.
    Oracle,
    /// Recorded replies from --fixtures.
    Scripted,
    /// OpenAI-compatible endpoint from MODEL_ENDPOINT.
    Remote,
    /// No model at all; local fallbacks only.
    Disabled,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, its questions and its ground truth.
    GenSynthetic {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_QUESTIONS)]
        questions: usize,
        /// TOML file with world parameters.
        #[arg(long)]
        synth_config: Option<PathBuf>,
    },
    /// Build and persist indexes and the graph for a corpus.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Answer a question file.
    Answer {
        #[arg(long, value_enum)]
        pipeline: PipelineArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "disabled")]
        backend: Backend,
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Oracle only: fraction of non-target windows answered wrongly.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Where to dump the call ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Oracle only: save every reply as a scripted fixture file.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Score answers against gold labels.
    Eval {
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn gateway_for(
    backend: Backend,
    data: &Path,
    questions: &[vidqa_core::query::Question],
    fixtures: Option<&Path>,
    noise: (f64, u64),
    record: bool,
) -> Result<(Gateway, Option<Arc<RecordingChannel>>)> {
    let gateway = match backend {
        Backend::Oracle => {
            let truth = HarnessTruth::load(data.join("truth.json"))?;
            let set = QuestionSet {
                questions: questions.to_vec(),
                targets: truth.targets,
            };
            let oracle: Arc<dyn Channel> =
                Arc::new(OracleChannel::new(Arc::new(truth.script), &set).with_noise(noise.0, noise.1));
            if record {
                let rec = Arc::new(RecordingChannel::new(oracle));
                return Ok((oracle_gateway(rec.clone()), Some(rec)));
            }
            oracle_gateway(oracle)
        }
        Backend::Scripted => {
            let Some(path) = fixtures else {
                bail!("--backend scripted needs --fixtures");
            };
            let ch = ScriptedChannel::load(path, "scripted", UnknownKeyPolicy::Error)?;
            let roles = ch.roles();
            let ch: Arc<dyn Channel> = Arc::new(ch);
            roles.into_iter().fold(Gateway::default(), |g, r| g.route(r, ch.clone()))
        }
        Backend::Remote => {
            let Some(cfg) = RemoteConfig::from_env(None) else {
                bail!("MODEL_ENDPOINT is not set");
            };
            let primary: Arc<dyn Channel> = Arc::new(RemoteChannel::new("remote", cfg)?);
            let mut g = Gateway::single(primary);
            if let Some(alt) = RemoteConfig::from_env(Some("alt")) {
                let alt: Arc<dyn Channel> = Arc::new(RemoteChannel::new("remote-alt", alt)?);
                for role in vidqa_bench::run::ORACLE_ROLES {
                    g = g.with_alternative(role, alt.clone());
                }
            }
            g
        }
        Backend::Disabled => Gateway::single(Arc::new(DisabledChannel::new("disabled"))),
    };
    Ok((gateway, None))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            seed,
            out,
            questions,
            synth_config,
        } => {
            let synth: SynthConfig = read_toml(synth_config.as_deref())?;
            let (corpus, script) = generate_corpus(seed, &synth)?;
            let set = generate_questions(&script, questions, &IntentMix::default())?;
            corpus.write(&out)?;
            write_questions(out.join("questions.jsonl"), &set.questions)?;
            HarnessTruth {
                script,
                targets: set.targets,
            }
            .save(out.join("truth.json"))?;
            info!("wrote {} records and {} questions to {}", corpus.lanes.len(), set.questions.len(), out.display());
        }
        Command::Build { data, out, config } => {
            let config: EngineConfig = read_toml(config.as_deref())?;
            let engine = Engine::build(Corpus::load(&data)?, config)?;
            engine.persist(&out)?;
            info!("{} cells, {} observations", engine.cell_docs.len(), engine.graph.observations.len());
        }
        Command::Answer {
            pipeline,
            data,
            questions,
            out,
            backend,
            fixtures,
            config,
            noise,
            noise_seed,
            ledger,
            record,
        } => {
            if record.is_some() && backend != Backend::Oracle {
                bail!("--record needs --backend oracle");
            }
            let config: EngineConfig = read_toml(config.as_deref())?;
            let engine = Engine::build(Corpus::load(&data)?, config)?;
            let qs = load_questions(&questions)?;
            let (gateway, recorder) =
                gateway_for(backend, &data, &qs, fixtures.as_deref(), (noise, noise_seed), record.is_some())?;
            let pipeline = match pipeline {
                PipelineArg::Sva => Pipeline::Sva,
                PipelineArg::Tmkg => Pipeline::Tmkg,
            };
            let answers = answer_all(&qs, &engine, &gateway, pipeline)
                .into_iter()
                .collect::<vidqa_core::Result<Vec<_>>>()?;
            write_answers(&out, &answers)?;
            if let Some(path) = ledger {
                gateway.ledger().dump(path)?;
            }
            if let (Some(path), Some(rec)) = (record, recorder) {
                rec.write(&path)?;
            }
            info!("answered {} questions", answers.len());
        }
        Command::Eval {
            answers,
            questions,
            report,
            truth,
        } => {
            let answers = load_answers(&answers)?;
            let qs = load_questions(&questions)?;
            let truth = truth.map(HarnessTruth::load).transpose()?;
            let r = evaluate(&answers, &qs, truth.as_ref())?;
            fs::write(&report, serde_json::to_string_pretty(&r)?).with_context(|| format!("writing {}", report.display()))?;
            println!("accuracy {:.4} ({}/{})", r.accuracy, r.correct, r.total);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
