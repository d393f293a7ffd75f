//! Hybrid lexical + dense retrieval over summary documents.
//!
//! BM25 scoring:
//!
//! ```text
//! score(D, Q) = Σ_{q ∈ Q} idf(q) · tf(q, D) · (k1 + 1) / (tf(q, D) + k1 · (1 − b + b · |D| / avgdl))
//! idf(q)      = ln(1 + (N − df(q) + 0.5) / (df(q) + 0.5))
//! ```
//!
//! Lexical and dense rankings are combined with reciprocal-rank fusion,
//! `Σ 1 / (k + rank)` with 1-based ranks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cells::{CellDocument, DocKey};
use crate::error::{Error, GatewayError, Result};
pub use crate::text::tokenize;
use crate::text::is_stopword;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_RRF_K: f64 = 60.0;
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Documents sorted by score descending, ties broken by id ascending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts and de-duplicates (keeping the best score per id).
    pub fn from_scores(scores: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut best: HashMap<String, f64> = HashMap::new();
        for (id, s) in scores {
            best.entry(id)
                .and_modify(|cur| {
                    if s > *cur {
                        *cur = s
                    }
                })
                .or_insert(s);
        }
        let mut entries: Vec<(String, f64)> = best.into_iter().collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        RankedList { entries }
    }

    pub fn truncate(mut self, k: usize) -> Self {
        self.entries.truncate(k);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn top(&self) -> Option<&(String, f64)> {
        self.entries.first()
    }

    pub fn score_of(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|(d, _)| d == id).map(|(_, s)| *s)
    }

    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(d, _)| d == id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Okapi BM25 inverted index.
#[derive(Debug, Clone, PartialEq)]
pub struct TextIndex {
    pub params: Bm25Params,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<u32>,
    pub avg_len: f64,
    pub postings: BTreeMap<String, Vec<Posting>>,
}

impl TextIndex {
    pub fn build<I, S, T>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut doc_ids = Vec::new();
        let mut doc_lengths = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (id, text) in docs {
            let id: String = id.into();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateDocId(id));
            }
            let doc = doc_ids.len() as u32;
            let tokens = tokenize(text.as_ref());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting { doc, tf: count });
            }
            doc_ids.push(id);
            doc_lengths.push(tokens.len() as u32);
        }
        let n = doc_lengths.len();
        let avg_len = if n == 0 {
            0.0
        } else {
            doc_lengths.iter().map(|l| *l as f64).sum::<f64>() / n as f64
        };
        Ok(TextIndex {
            params,
            doc_ids,
            doc_lengths,
            avg_len,
            postings,
        })
    }

    pub fn n(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        let n = self.n() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` BM25 hits among documents accepted by `filter`; documents
    /// matching no query term are never returned.
    pub fn search_filtered(&self, query: &str, k: usize, filter: &dyn Fn(&str) -> bool) -> RankedList {
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for p in list {
                let dl = self.doc_lengths[p.doc as usize] as f64;
                let tf = p.tf as f64;
                let contribution =
                    idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / self.avg_len));
                *scores.entry(p.doc).or_insert(0.0) += contribution;
            }
        }
        RankedList::from_scores(
            scores
                .into_iter()
                .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
                .filter(|(id, _)| filter(id)),
        )
        .truncate(k)
    }

    pub fn search(&self, query: &str, k: usize) -> RankedList {
        self.search_filtered(query, k, &|_| true)
    }

    /// Header line followed by one postings line per term.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let header = TextIndexHeader {
            n: self.n(),
            avg_len: self.avg_len,
            k1: self.params.k1,
            b: self.params.b,
            doc_ids: self.doc_ids.clone(),
            doc_lengths: self.doc_lengths.clone(),
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for (term, list) in &self.postings {
            let line = PostingsLine {
                term: term.clone(),
                postings: list.iter().map(|p| (p.doc, p.tf)).collect(),
            };
            serde_json::to_writer(&mut out, &line).expect("postings serialize");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = raw.lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing index header".into(),
        })?;
        let header: TextIndexHeader = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;
        if header.doc_ids.len() != header.n || header.doc_lengths.len() != header.n {
            return Err(Error::Validation("index header counts disagree".into()));
        }
        let mut postings = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let pl: PostingsLine = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e))?;
            if pl.postings.iter().any(|(d, _)| *d as usize >= header.n) {
                return Err(Error::Validation(format!(
                    "postings for {:?} reference unknown documents",
                    pl.term
                )));
            }
            postings.insert(
                pl.term,
                pl.postings.into_iter().map(|(doc, tf)| Posting { doc, tf }).collect(),
            );
        }
        Ok(TextIndex {
            params: Bm25Params {
                k1: header.k1,
                b: header.b,
            },
            doc_ids: header.doc_ids,
            doc_lengths: header.doc_lengths,
            avg_len: header.avg_len,
            postings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TextIndexHeader {
    n: usize,
    avg_len: f64,
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct PostingsLine {
    term: String,
    postings: Vec<(u32, u32)>,
}

pub fn build_text_index(docs: &[CellDocument], k1: f64, b: f64) -> Result<TextIndex> {
    TextIndex::build(docs.iter().map(|d| (d.id(), d.text.as_str())), Bm25Params { k1, b })
}

pub fn search_text(index: &TextIndex, query: &str, k: usize) -> RankedList {
    index.search(query, k)
}

/// A dense vector; texts without content embed to a zero, non-retrievable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub retrievable: bool,
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

fn l2_normalise(acc: &[f64]) -> Embedding {
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Embedding {
            vector: vec![0.0; acc.len()],
            retrievable: false,
        };
    }
    Embedding {
        vector: acc.iter().map(|x| (x / norm) as f32).collect(),
        retrievable: true,
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic test embedder: content tokens hashed into `dim` buckets,
/// counted, then L2-normalised.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBowEmbedder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl Embedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut acc = vec![0.0f64; self.dim];
        for t in tokenize(text) {
            if is_stopword(&t) {
                continue;
            }
            acc[self.bucket(&t)] += 1.0;
        }
        Ok(l2_normalise(&acc))
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, dim: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| GatewayError::Http(e.to_string()))?;
        Ok(RemoteEmbedder {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            dim,
            client,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if tokenize(text).is_empty() {
            return Ok(Embedding {
                vector: vec![0.0; self.dim],
                retrievable: false,
            });
        }
        let mut req = self
            .client
            .post(format!("{}/embeddings", self.endpoint))
            .json(&serde_json::json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Http(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(GatewayError::Http(format!("embedding endpoint returned {}", resp.status())).into());
        }
        let body: EmbeddingResponse = resp.json().map_err(|e| GatewayError::Http(e.to_string()))?;
        let v = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Http("empty embedding response".into()))?
            .embedding;
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(l2_normalise(&v))
    }
}

/// Brute-force cosine index over unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub dim: usize,
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl DenseIndex {
    pub fn new(dim: usize) -> Self {
        DenseIndex {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    /// Adds a vector; non-retrievable embeddings are skipped.
    pub fn insert(&mut self, id: impl Into<String>, emb: Embedding) -> Result<()> {
        if emb.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: emb.vector.len(),
            });
        }
        if !emb.retrievable {
            return Ok(());
        }
        let norm = emb.vector.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("vector norm {norm} is not unit")));
        }
        let id = id.into();
        if self.ids.contains(&id) {
            return Err(Error::DuplicateDocId(id));
        }
        self.ids.push(id);
        self.vectors.push(emb.vector);
        Ok(())
    }

    pub fn build(docs: &[CellDocument], embedder: &dyn Embedder) -> Result<Self> {
        let mut index = DenseIndex::new(embedder.dim());
        for d in docs {
            index.insert(d.id(), embedder.embed(&d.text)?)?;
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn search_filtered(
        &self,
        query: &[f32],
        k: usize,
        filter: &dyn Fn(&str) -> bool,
    ) -> Result<RankedList> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let qn = l2(query);
        let scored = self
            .ids
            .iter()
            .zip(&self.vectors)
            .filter(|(id, _)| filter(id))
            .map(|(id, v)| {
                let s = if qn == 0.0 { 0.0 } else { dot(v, query) / (l2(v) * qn) };
                (id.clone(), s)
            });
        Ok(RankedList::from_scores(scored).truncate(k))
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<RankedList> {
        self.search_filtered(query, k, &|_| true)
    }

    /// Writes `<base>.f32` (little-endian rows) and `<base>.ids`.
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        let vec_path = base.with_extension("f32");
        let ids_path = base.with_extension("ids");
        let mut buf = Vec::with_capacity(self.len() * self.dim * 4);
        for v in &self.vectors {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(&vec_path, buf).map_err(|e| Error::io(&vec_path, e))?;
        let mut ids = fs::File::create(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        for id in &self.ids {
            writeln!(ids, "{id}").map_err(|e| Error::io(&ids_path, e))?;
        }
        Ok(())
    }

    pub fn load(base: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let base = base.as_ref();
        let vec_path = base.with_extension("f32");
        let ids_path = base.with_extension("ids");
        let raw = fs::read(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
        let ids: Vec<String> = fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .map(str::to_string)
            .collect();
        if raw.len() != ids.len() * dim * 4 {
            return Err(Error::Validation(format!(
                "{} bytes do not hold {} rows of dimension {dim}",
                raw.len(),
                ids.len()
            )));
        }
        let vectors = raw
            .chunks_exact(dim * 4)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect()
            })
            .collect();
        Ok(DenseIndex { dim, ids, vectors })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

pub fn search_dense(index: &DenseIndex, query: &[f32], k: usize) -> Result<RankedList> {
    index.search(query, k)
}

/// Reciprocal-rank fusion. Each document's contributions are summed in
/// ascending order so the result does not depend on the order of `lists`.
pub fn fuse_rrf(lists: &[RankedList], k_rrf: f64) -> RankedList {
    let mut parts: HashMap<&str, Vec<f64>> = HashMap::new();
    for list in lists {
        for (rank, (id, _)) in list.entries.iter().enumerate() {
            parts
                .entry(id.as_str())
                .or_default()
                .push(1.0 / (k_rrf + (rank + 1) as f64));
        }
    }
    RankedList::from_scores(parts.into_iter().map(|(id, mut c)| {
        c.sort_by(f64::total_cmp);
        (id.to_string(), c.iter().sum())
    }))
}

/// BM25 + dense index over the same documents, fused with RRF.
#[derive(Clone)]
pub struct HybridIndex {
    pub text: TextIndex,
    pub dense: DenseIndex,
    pub embedder: Arc<dyn Embedder>,
    pub rrf_k: f64,
}

impl std::fmt::Debug for HybridIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridIndex")
            .field("docs", &self.text.n())
            .field("dense", &self.dense.len())
            .field("rrf_k", &self.rrf_k)
            .finish()
    }
}

impl HybridIndex {
    pub fn build(
        docs: &[CellDocument],
        params: Bm25Params,
        embedder: Arc<dyn Embedder>,
        rrf_k: f64,
    ) -> Result<Self> {
        let text = TextIndex::build(docs.iter().map(|d| (d.id(), d.text.as_str())), params)?;
        let dense = DenseIndex::build(docs, embedder.as_ref())?;
        Ok(HybridIndex {
            text,
            dense,
            embedder,
            rrf_k,
        })
    }

    pub fn from_pairs<'a>(
        docs: impl IntoIterator<Item = (String, &'a str)> + Clone,
        params: Bm25Params,
        embedder: Arc<dyn Embedder>,
        rrf_k: f64,
    ) -> Result<Self> {
        let text = TextIndex::build(docs.clone(), params)?;
        let mut dense = DenseIndex::new(embedder.dim());
        for (id, t) in docs {
            dense.insert(id, embedder.embed(t)?)?;
        }
        Ok(HybridIndex {
            text,
            dense,
            embedder,
            rrf_k,
        })
    }

    /// The two component rankings over the accepted documents. Dense hits
    /// with non-positive similarity are dropped so that unrelated documents
    /// do not collect fusion credit.
    pub fn component_rankings(
        &self,
        query: &str,
        filter: &dyn Fn(&str) -> bool,
    ) -> Result<(RankedList, RankedList)> {
        let lexical = self.text.search_filtered(query, usize::MAX, filter);
        let q = self.embedder.embed(query)?;
        let dense = if q.retrievable {
            let mut d = self.dense.search_filtered(&q.vector, usize::MAX, filter)?;
            d.entries.retain(|(_, s)| *s > 0.0);
            d
        } else {
            RankedList::default()
        };
        Ok((lexical, dense))
    }

    pub fn search_filtered(
        &self,
        query: &str,
        k: usize,
        filter: &dyn Fn(&str) -> bool,
    ) -> Result<RankedList> {
        let (lexical, dense) = self.component_rankings(query, filter)?;
        Ok(fuse_rrf(&[lexical, dense], self.rrf_k).truncate(k))
    }

    pub fn search(&self, query: &str, k: usize) -> Result<RankedList> {
        self.search_filtered(query, k, &|_| true)
    }
}

/// Ranks the 15-minute buckets of the `top_cells` best cells by the fused
/// hybrid score of each bucket's own document.
pub fn score_buckets(
    cell_ranking: &RankedList,
    bucket_index: &HybridIndex,
    query: &str,
    top_cells: usize,
) -> Result<RankedList> {
    if top_cells == 0 {
        return Err(Error::Validation("top_cells must be at least 1".into()));
    }
    let allowed: HashSet<&str> = cell_ranking.ids().take(top_cells).collect();
    let in_top_cells = |id: &str| match id.parse::<DocKey>() {
        Ok(DocKey::Bucket(b)) => allowed.contains(b.cell.to_string().as_str()),
        _ => false,
    };
    bucket_index.search_filtered(query, usize::MAX, &in_top_cells)
}
