//! Retrieval over the document store: an Okapi BM25 inverted index and an
//! exact brute-force dense index fed by an embedding client.
//!
//! Both retrievers return full rankings truncated to `min(k, N)`, scores
//! non-increasing, ties broken by ascending doc id. Documents matching no
//! query term score 0 and still participate in the ranking, so an
//! out-of-vocabulary query yields the corpus in id order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Store;
use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Ranking for one query, as persisted in retrieval dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<ScoredDoc>,
}

/// Common query interface of the BM25 and dense indexes.
pub trait SearchIndex: Send + Sync {
    /// Top-`min(k, N)` documents for `query`.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>>;

    fn doc_count(&self) -> usize;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Params {
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
}

fn default_k1() -> f64 {
    2.0
}

fn default_b() -> f64 {
    0.75
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: default_k1(), b: default_b() }
    }
}

#[derive(Debug)]
struct Posting {
    doc: u32,
    tf: u32,
}

/// Okapi BM25 index. idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), which is
/// nonnegative for every df <= N. Each query token occurrence contributes to
/// the sum, so repeated query terms count twice.
#[derive(Debug)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    id_to_idx: HashMap<String, u32>,
    doc_len: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<Posting>>,
}

/// Tokenizes every document in the store snapshot and builds the postings.
pub fn build_bm25_index(store: &Store, params: Bm25Params) -> Result<Bm25Index> {
    if params.k1 < 0.0 || !(0.0..=1.0).contains(&params.b) {
        return Err(Error::InvalidInput(format!(
            "bm25 params out of range: k1={} b={}",
            params.k1, params.b
        )));
    }
    let mut doc_ids = Vec::with_capacity(store.len());
    let mut id_to_idx = HashMap::with_capacity(store.len());
    let mut doc_len = Vec::with_capacity(store.len());
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut total_len = 0u64;

    for (i, doc) in store.docs().iter().enumerate() {
        let idx = i as u32;
        let tokens = tokenize(&doc.text);
        total_len += tokens.len() as u64;
        doc_len.push(tokens.len() as u32);
        doc_ids.push(doc.doc_id.clone());
        id_to_idx.insert(doc.doc_id.clone(), idx);

        let mut counts: HashMap<String, u32> = HashMap::new();
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            postings.entry(term).or_default().push(Posting { doc: idx, tf });
        }
    }
    // Postings stay sorted by doc index because docs are visited in order.
    let avg_len = if doc_ids.is_empty() {
        0.0
    } else {
        total_len as f64 / doc_ids.len() as f64
    };
    Ok(Bm25Index {
        params,
        doc_ids,
        id_to_idx,
        doc_len,
        avg_len,
        postings,
    })
}

impl Bm25Index {
    pub fn params(&self) -> Bm25Params {
        self.params
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let len_ratio = if self.avg_len > 0.0 {
            self.doc_len[doc as usize] as f64 / self.avg_len
        } else {
            0.0
        };
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_ratio))
    }

    /// Score of one (query, document) pair. Accumulates per query token in
    /// sequence order, exactly as [`SearchIndex::retrieve`] does, so the two
    /// agree bit-for-bit.
    pub fn score(&self, query: &str, doc_id: &str) -> Result<f64> {
        let &idx = self
            .id_to_idx
            .get(doc_id)
            .ok_or_else(|| Error::NotFound(format!("document {doc_id}")))?;
        let mut score = 0.0;
        for tok in tokenize(query) {
            if let Some(list) = self.postings.get(&tok) {
                let idf = self.idf(list.len());
                if let Ok(pos) = list.binary_search_by_key(&idx, |p| p.doc) {
                    score += idf * self.term_weight(list[pos].tf, idx);
                }
            }
        }
        Ok(score)
    }
}

impl SearchIndex for Bm25Index {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        let mut scores = vec![0.0f64; self.doc_ids.len()];
        for tok in tokenize(query) {
            if let Some(list) = self.postings.get(&tok) {
                let idf = self.idf(list.len());
                for p in list {
                    scores[p.doc as usize] += idf * self.term_weight(p.tf, p.doc);
                }
            }
        }
        Ok(rank(&self.doc_ids, &scores, k))
    }

    fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }
}

/// Sorts all documents by (score desc, doc id asc) and truncates to k.
fn rank(doc_ids: &[String], scores: &[f64], k: usize) -> Vec<ScoredDoc> {
    let mut order: Vec<usize> = (0..doc_ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| doc_ids[a].cmp(&doc_ids[b]))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| ScoredDoc {
            doc_id: doc_ids[i].clone(),
            score: scores[i],
        })
        .collect()
}

/// Batch text-embedding backend. Implementations must return one vector per
/// input, in input order.
pub trait EmbeddingClient: Send + Sync {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Exact dense index: stores full document vectors, scores by dot product.
pub struct DenseIndex {
    doc_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
    embedder: Box<dyn EmbeddingClient>,
}

impl std::fmt::Debug for DenseIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseIndex")
            .field("docs", &self.doc_ids.len())
            .field("dim", &self.dim)
            .finish()
    }
}

/// Embeds every document in batches of `batch_size`. All returned vectors
/// must share one dimension; a transport failure names the offending batch.
pub fn build_dense_index(
    store: &Store,
    embedder: Box<dyn EmbeddingClient>,
    batch_size: usize,
) -> Result<DenseIndex> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("embedding batch_size must be >= 1".into()));
    }
    let doc_ids: Vec<String> = store.docs().iter().map(|d| d.doc_id.clone()).collect();
    let texts: Vec<String> = store.docs().iter().map(|d| d.text.clone()).collect();
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
    let mut dim: Option<usize> = None;

    for (batch_no, batch) in texts.chunks(batch_size).enumerate() {
        let embedded = embedder.embed(batch).map_err(|e| match e {
            Error::Transport { attempts, message } => Error::Transport {
                attempts,
                message: format!("embedding batch {batch_no}: {message}"),
            },
            other => other,
        })?;
        if embedded.len() != batch.len() {
            return Err(Error::Schema(format!(
                "embedding batch {batch_no}: got {} vectors for {} inputs",
                embedded.len(),
                batch.len()
            )));
        }
        for v in embedded {
            match dim {
                None => {
                    if v.is_empty() {
                        return Err(Error::Schema("embedding with dimension 0".into()));
                    }
                    dim = Some(v.len());
                }
                Some(d) if v.len() != d => {
                    return Err(Error::Schema(format!(
                        "inconsistent embedding dimensions: {d} then {}",
                        v.len()
                    )));
                }
                _ => {}
            }
            vectors.push(v);
        }
    }
    Ok(DenseIndex {
        doc_ids,
        vectors,
        dim: dim.unwrap_or(0),
        embedder,
    })
}

impl DenseIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SearchIndex for DenseIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        if self.doc_ids.is_empty() {
            return Ok(Vec::new());
        }
        let mut vs = self.embedder.embed(&[query.to_string()])?;
        if vs.len() != 1 {
            return Err(Error::Schema(format!(
                "query embedding: got {} vectors for 1 input",
                vs.len()
            )));
        }
        let qv = vs.pop().unwrap();
        if qv.len() != self.dim {
            return Err(Error::Schema(format!(
                "query embedding dimension {} != index dimension {}",
                qv.len(),
                self.dim
            )));
        }
        let scores: Vec<f64> = self.vectors.iter().map(|v| dot(&qv, v)).collect();
        Ok(rank(&self.doc_ids, &scores, k))
    }

    fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }
}

/// Deterministic offline embedder: feature-hashed bag of words, L2-normalized.
/// Stands in for a remote embedding service in scripted runs; similarity is
/// crude lexical overlap, which is all the fixtures need.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    pub dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        HashedEmbedder { dim: dim.max(1) }
    }

    fn bucket(&self, token: &str) -> usize {
        // FNV-1a; stable across platforms, unlike the std hasher.
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in token.bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        (h % self.dim as u64) as usize
    }
}

impl EmbeddingClient for HashedEmbedder {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(inputs
            .iter()
            .map(|text| {
                let mut v = vec![0.0f64; self.dim];
                for tok in tokenize(text) {
                    v[self.bucket(&tok)] += 1.0;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                }
                v
            })
            .collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedItem {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

/// Remote embedding service speaking `{model, input}` in and
/// `{data: [{index, embedding}]}` out. Vectors are reordered by `index`, so
/// out-of-order responses are fine; missing or duplicate indices are not.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl EmbeddingClient for HttpEmbedder {
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut req = self.client.post(&self.endpoint).json(&EmbedRequest {
            model: &self.model,
            input: inputs,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("embedder {}: {e}", self.endpoint),
        })?;
        if !resp.status().is_success() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!("embedder {}: {}", self.endpoint, resp.status()),
            });
        }
        let parsed: EmbedResponse = resp
            .json()
            .map_err(|e| Error::Schema(format!("embedding response: {e}")))?;
        if parsed.data.len() != inputs.len() {
            return Err(Error::Schema(format!(
                "embedding response: {} vectors for {} inputs",
                parsed.data.len(),
                inputs.len()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        for item in parsed.data {
            let slot = slots.get_mut(item.index).ok_or_else(|| {
                Error::Schema(format!("embedding response: index {} out of range", item.index))
            })?;
            if slot.replace(item.embedding).is_some() {
                return Err(Error::Schema(format!(
                    "embedding response: duplicate index {}",
                    item.index
                )));
            }
        }
        Ok(slots.into_iter().map(|s| s.unwrap()).collect())
    }
}
