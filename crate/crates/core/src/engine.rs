//! Corpus bundle, configuration and the prebuilt indexes both pipelines share.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cells::{
    build_documents, partition, write_documents, CellDocument, DocKey, Granularity, SubWindowKey,
    DEFAULT_SPAN_AFTER, DEFAULT_SPAN_BEFORE,
};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, LABELS};
use crate::kg::{KgConfig, KnowledgeGraph, PredicateBetas};
use crate::lane::{CorpusManifest, LaneRecord, LaneStore, TimeWindow};
use crate::query::{Catalogs, Lexicons};
use crate::retrieval::{Bm25Params, Embedder, HashedBowEmbedder, HybridIndex, DEFAULT_RRF_K};

/// Everything read from a corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub lanes: LaneStore,
    pub catalogs: Catalogs,
    pub lexicons: Lexicons,
}

impl Corpus {
    /// Layout: `manifest.json`, `lanes/<lane>.jsonl`, `catalogs/{places,objects,actions}.json`
    /// and an optional `lexicons.json`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = CorpusManifest::load(dir.join("manifest.json"))?;
        let lanes = LaneStore::load_dir(dir.join("lanes"), &manifest)?;
        let catalogs = Catalogs::load_dir(dir.join("catalogs"), &manifest)?;
        let lex_path = dir.join("lexicons.json");
        let lexicons = if lex_path.exists() {
            Lexicons::load(&lex_path)?
        } else {
            Lexicons::default()
        };
        Ok(Corpus {
            manifest,
            lanes,
            catalogs,
            lexicons,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["lanes", "catalogs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mpath = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&mpath, body).map_err(|e| Error::io(&mpath, e))?;
        self.lanes.write_dir(dir.join("lanes"))?;
        self.catalogs.write_dir(dir.join("catalogs"))?;
        let lpath = dir.join("lexicons.json");
        let body = serde_json::to_string_pretty(&self.lexicons).expect("lexicons serialize");
        fs::write(&lpath, body).map_err(|e| Error::io(&lpath, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k1: f64,
    pub b: f64,
    pub rrf_k: f64,
    pub embedding_dim: usize,
    /// Character budget of each summary document.
    pub summary_budget: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k1: 1.2,
            b: 0.75,
            rrf_k: DEFAULT_RRF_K,
            embedding_dim: 256,
            summary_budget: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvaConfig {
    /// Cells retrieved before the rerank call.
    pub cell_candidates: usize,
    /// Cells whose buckets are scored.
    pub bucket_cells: usize,
    /// Buckets offered to the narrowing call.
    pub bucket_candidates: usize,
    /// Buckets offered to the final pick.
    pub final_candidates: usize,
    /// Cameras in the verification expansion.
    pub cameras: usize,
    pub span_before: u32,
    pub span_after: u32,
    pub echo_ngram: usize,
    /// Characters of each candidate document shown to search calls.
    pub excerpt_chars: usize,
}

impl Default for SvaConfig {
    fn default() -> Self {
        SvaConfig {
            cell_candidates: 8,
            bucket_cells: 2,
            bucket_candidates: 6,
            final_candidates: 4,
            cameras: 4,
            span_before: DEFAULT_SPAN_BEFORE,
            span_after: DEFAULT_SPAN_AFTER,
            echo_ngram: 6,
            excerpt_chars: 4000,
        }
    }
}

/// When the selection scores are divided by the top score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormaliseStage {
    /// Divide fused scores by the top fused score, then add predicate bonuses.
    BeforeBonus,
    /// Add bonuses to the fused scores, then divide by the new top.
    AfterBonus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmkgConfig {
    pub tau_score: f64,
    pub tau_margin: f64,
    pub k: usize,
    /// Observations retrieved before selection.
    pub candidates: usize,
    pub normalise: NormaliseStage,
    pub betas: PredicateBetas,
}

impl Default for TmkgConfig {
    fn default() -> Self {
        TmkgConfig {
            tau_score: 0.55,
            tau_margin: 0.2,
            k: 3,
            candidates: 50,
            normalise: NormaliseStage::BeforeBonus,
            betas: PredicateBetas::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub retrieval: RetrievalConfig,
    pub sva: SvaConfig,
    pub tmkg: TmkgConfig,
    pub kg: KgConfig,
}

/// Corpus plus every derived structure, immutable once built.
pub struct Engine {
    pub corpus: Corpus,
    pub config: EngineConfig,
    pub cell_docs: Vec<CellDocument>,
    pub bucket_docs: Vec<CellDocument>,
    pub cell_index: HybridIndex,
    pub bucket_index: HybridIndex,
    pub subwindows: BTreeMap<SubWindowKey, Vec<LaneRecord>>,
    pub graph: KnowledgeGraph,
    pub obs_index: HybridIndex,
}

impl Engine {
    pub fn build(corpus: Corpus, config: EngineConfig) -> Result<Self> {
        let dim = config.retrieval.embedding_dim;
        Engine::build_with(corpus, config, Arc::new(HashedBowEmbedder::new(dim)), None)
    }

    /// Builds with a chosen embedder; with `summariser` the cell and bucket
    /// documents are model summaries.
    pub fn build_with(
        corpus: Corpus,
        config: EngineConfig,
        embedder: Arc<dyn Embedder>,
        summariser: Option<&Gateway>,
    ) -> Result<Self> {
        let records: Vec<LaneRecord> = corpus.lanes.all().cloned().collect();
        let budget = config.retrieval.summary_budget;
        let params = Bm25Params {
            k1: config.retrieval.k1,
            b: config.retrieval.b,
        };
        let rrf_k = config.retrieval.rrf_k;
        let cell_docs = build_documents(&records, &corpus.manifest, Granularity::Cell, budget, summariser)?;
        let bucket_docs = build_documents(&records, &corpus.manifest, Granularity::Bucket, budget, summariser)?;
        let cell_index = HybridIndex::build(&cell_docs, params, embedder.clone(), rrf_k)?;
        let bucket_index = HybridIndex::build(&bucket_docs, params, embedder.clone(), rrf_k)?;
        let subwindows = partition(&records, &corpus.manifest, Granularity::Subwindow)
            .into_iter()
            .filter_map(|(k, v)| match k {
                DocKey::SubWindow(s) => Some((s, v)),
                _ => None,
            })
            .collect();
        let graph = KnowledgeGraph::build(&corpus.lanes, &corpus.manifest, &corpus.catalogs, &config.kg);
        let obs_texts: Vec<(String, String)> = graph
            .observations
            .values()
            .map(|o| (o.id.clone(), o.document_text()))
            .collect();
        let obs_index = HybridIndex::from_pairs(
            obs_texts.iter().map(|(id, t)| (id.clone(), t.as_str())),
            params,
            embedder,
            rrf_k,
        )?;
        Ok(Engine {
            corpus,
            config,
            cell_docs,
            bucket_docs,
            cell_index,
            bucket_index,
            subwindows,
            graph,
            obs_index,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.corpus.manifest
    }

    pub fn records_in(&self, key: &SubWindowKey) -> &[LaneRecord] {
        self.subwindows.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn bucket_text(&self, id: &str) -> &str {
        doc_text(&self.bucket_docs, id)
    }

    pub fn cell_text(&self, id: &str) -> &str {
        doc_text(&self.cell_docs, id)
    }

    /// Writes documents, indexes and graph segments under `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_documents(dir.join("cell.docs.jsonl"), &self.cell_docs)?;
        write_documents(dir.join("bucket.docs.jsonl"), &self.bucket_docs)?;
        self.cell_index.text.save(dir.join("cell.bm25.jsonl"))?;
        self.cell_index.dense.save(dir.join("cell.dense"))?;
        self.bucket_index.text.save(dir.join("bucket.bm25.jsonl"))?;
        self.bucket_index.dense.save(dir.join("bucket.dense"))?;
        self.obs_index.text.save(dir.join("observation.bm25.jsonl"))?;
        self.obs_index.dense.save(dir.join("observation.dense"))?;
        self.graph.save(dir.join("kg"))
    }
}

fn doc_text<'a>(docs: &'a [CellDocument], id: &str) -> &'a str {
    docs.binary_search_by(|d| d.id().as_str().cmp(id))
        .ok()
        .or_else(|| docs.iter().position(|d| d.id() == id))
        .map(|i| docs[i].text.as_str())
        .unwrap_or("")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Sva,
    Tmkg,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Sva => "sva",
            Pipeline::Tmkg => "tmkg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportingView {
    pub camera: String,
    pub window: String,
}

/// Final per-question output of either pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub choice: String,
    pub confidence: f64,
    pub supporting_views: Vec<SupportingView>,
    pub rationale: String,
    pub ledger_total: usize,
    #[serde(default)]
    pub model_calls: usize,
    pub pipeline: Pipeline,
    /// Windows the pipeline committed to (primary bucket or selected observations).
    #[serde(default)]
    pub focus: Vec<TimeWindow>,
    #[serde(default)]
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationStats>,
}

/// Outcome counts of the verification stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerificationStats {
    pub subwindows: usize,
    pub accepted: usize,
    pub abstained: usize,
    pub rejected: usize,
    pub empty: usize,
    pub errors: usize,
}

impl AnswerRecord {
    pub fn validate(&self) -> Result<()> {
        if !LABELS.contains(&self.choice.as_str()) {
            return Err(Error::Validation(format!("choice {:?} is not A-D", self.choice)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!("confidence {} outside [0,1]", self.confidence)));
        }
        Ok(())
    }
}

pub fn write_answers(path: impl AsRef<Path>, answers: &[AnswerRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for a in answers {
        out.push_str(&serde_json::to_string(a).expect("answers serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_answers(path: impl AsRef<Path>) -> Result<Vec<AnswerRecord>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Frame reference for a camera window, resolved by the serving side.
pub fn frame_ref(camera: &str, w: &TimeWindow) -> String {
    format!("frame://{camera}/{}-{}", w.start, w.end)
}

/// Distinct-token overlap scores per label, with the per-source weight
/// applied to each evidence text. Returns the winning label and whether
/// any evidence overlapped at all.
pub fn weighted_overlap_choice(
    choices: &[(String, String)],
    evidence: &[(f64, String)],
    tie_break: Option<&str>,
) -> (String, f64, bool) {
    use crate::text::content_tokens;
    let ev_tokens: Vec<(f64, std::collections::HashSet<String>)> =
        evidence.iter().map(|(w, t)| (*w, content_tokens(t))).collect();
    let mut scores: Vec<(String, f64)> = choices
        .iter()
        .map(|(label, text)| {
            let ct = content_tokens(text);
            let s: f64 = ev_tokens
                .iter()
                .map(|(w, et)| w * ct.intersection(et).count() as f64)
                .sum();
            (label.clone(), s)
        })
        .collect();
    scores.sort_by(|a, b| a.0.cmp(&b.0));
    let best = scores.iter().map(|(_, s)| *s).fold(0.0, f64::max);
    let total: f64 = scores.iter().map(|(_, s)| *s).sum();
    let tied: Vec<&str> = scores
        .iter()
        .filter(|(_, s)| *s == best)
        .map(|(l, _)| l.as_str())
        .collect();
    let label = match tie_break {
        Some(t) if tied.contains(&t) => t.to_string(),
        _ => tied.first().copied().unwrap_or("A").to_string(),
    };
    let confidence = if total > 0.0 { best / total } else { 0.0 };
    (label, confidence, best > 0.0)
}
