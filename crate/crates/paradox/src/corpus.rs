//! Document store: JSONL ingestion and export, query sets, token-window
//! chunking, and poison injection.
//!
//! The store is append-only. Clean documents come in through [`ingest_corpus`]
//! (which forces `origin = clean`); adversarial documents enter only through
//! [`Store::inject_poison`], which refuses id collisions and clean-flagged
//! docs. Indexes snapshot the store at build time.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{self, token_spans};

/// Provenance of a document. `poisoned` on [`Document`] must equal
/// `origin != Clean`; constructors and loaders enforce it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Clean,
    Paradox,
    PrependBaseline,
    External,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Clean => "clean",
            Origin::Paradox => "paradox",
            Origin::PrependBaseline => "prepend_baseline",
            Origin::External => "external",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default = "Origin::clean_default")]
    pub origin: Origin,
    #[serde(default)]
    pub poisoned: bool,
    /// Free-form label tying a poisoned doc to its target query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

impl Origin {
    fn clean_default() -> Origin {
        Origin::Clean
    }
}

impl Document {
    pub fn clean(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
            title: None,
            origin: Origin::Clean,
            poisoned: false,
            source_tag: None,
        }
    }

    pub fn adversarial(
        doc_id: impl Into<String>,
        text: impl Into<String>,
        origin: Origin,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if origin == Origin::Clean {
            return Err(Error::InvalidInput(
                "adversarial documents must not carry origin=clean".into(),
            ));
        }
        Ok(Document {
            doc_id: doc_id.into(),
            text: text.into(),
            title: None,
            origin,
            poisoned: true,
            source_tag: Some(source_tag.into()),
        })
    }

    /// `poisoned` must mirror the origin; a mismatch means a hand-built or
    /// hand-edited record.
    pub fn validate(&self) -> Result<()> {
        if self.doc_id.is_empty() {
            return Err(Error::InvalidInput("document with empty id".into()));
        }
        let expected = self.origin != Origin::Clean;
        if self.poisoned != expected {
            return Err(Error::InvalidInput(format!(
                "document {}: poisoned={} inconsistent with origin={}",
                self.doc_id,
                self.poisoned,
                self.origin.as_str()
            )));
        }
        Ok(())
    }
}

/// One option of a multiple-choice question.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct OptionEntry {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryCase {
    pub id: String,
    pub question: String,
    /// Gold answers; at least one. Any of them counts as correct.
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<OptionEntry>>,
    /// Target answer the attack tries to plant. Must fail the overlap check
    /// against every gold answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong_answer: Option<String>,
    /// Surface variant used at evaluation time when paraphrase mode is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase: Option<String>,
}

impl QueryCase {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidInput("query with empty id".into()));
        }
        if self.question.trim().is_empty() {
            return Err(Error::InvalidInput(format!("query {}: empty question", self.id)));
        }
        if self.answers.is_empty() {
            return Err(Error::InvalidInput(format!(
                "query {}: answer list is empty",
                self.id
            )));
        }
        if let Some(wrong) = &self.wrong_answer {
            for gold in &self.answers {
                if text::answers_overlap(wrong, gold) {
                    return Err(Error::InvalidInput(format!(
                        "query {}: wrong_answer {:?} overlaps gold answer {:?}",
                        self.id, wrong, gold
                    )));
                }
            }
        }
        if let Some(options) = &self.options {
            if options.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "query {}: options present but empty",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// The text handed to retrievers and the QA prompt: the paraphrase when
    /// one exists and paraphrase mode asks for it, the original otherwise.
    pub fn surface_question(&self, use_paraphrase: bool) -> &str {
        match (&self.paraphrase, use_paraphrase) {
            (Some(p), true) => p,
            _ => &self.question,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub total_docs: usize,
    pub clean_docs: usize,
    pub poisoned_docs: usize,
    /// poisoned / total; 0.0 for an empty store.
    pub poison_proportion: f64,
    pub by_origin: BTreeMap<String, usize>,
}

/// Append-only in-memory document collection with id lookup.
#[derive(Debug, Default)]
pub struct Store {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn require(&self, doc_id: &str) -> Result<&Document> {
        self.get(doc_id)
            .ok_or_else(|| Error::NotFound(format!("document {doc_id}")))
    }

    fn push(&mut self, doc: Document) -> Result<()> {
        doc.validate()?;
        if self.by_id.contains_key(&doc.doc_id) {
            return Err(Error::Conflict(format!("duplicate document id {}", doc.doc_id)));
        }
        self.by_id.insert(doc.doc_id.clone(), self.docs.len());
        self.docs.push(doc);
        Ok(())
    }

    /// Adds one clean document. Intended for programmatic fixture building;
    /// file loading goes through [`ingest_corpus`].
    pub fn add_clean(&mut self, doc_id: impl Into<String>, text: impl Into<String>) -> Result<()> {
        self.push(Document::clean(doc_id, text))
    }

    /// Appends adversarial documents. Existing documents are never touched;
    /// ids must be fresh both against the store and within the batch.
    pub fn inject_poison(&mut self, docs: Vec<Document>) -> Result<()> {
        let mut seen = HashMap::new();
        for doc in &docs {
            doc.validate()?;
            if doc.origin == Origin::Clean {
                return Err(Error::InvalidInput(format!(
                    "inject_poison given clean-origin doc {}",
                    doc.doc_id
                )));
            }
            if self.by_id.contains_key(&doc.doc_id) {
                return Err(Error::Conflict(format!(
                    "poison doc id {} collides with existing document",
                    doc.doc_id
                )));
            }
            if seen.insert(doc.doc_id.clone(), ()).is_some() {
                return Err(Error::Conflict(format!(
                    "poison doc id {} repeated within batch",
                    doc.doc_id
                )));
            }
        }
        for doc in docs {
            // Rechecked against the store as each doc lands; batch pre-check
            // above makes this infallible, the push keeps it honest.
            self.push(doc)?;
        }
        Ok(())
    }

    pub fn stats(&self) -> CorpusStats {
        let mut by_origin = BTreeMap::new();
        let mut poisoned = 0usize;
        for doc in &self.docs {
            *by_origin.entry(doc.origin.as_str().to_string()).or_insert(0) += 1;
            if doc.poisoned {
                poisoned += 1;
            }
        }
        let total = self.docs.len();
        CorpusStats {
            total_docs: total,
            clean_docs: total - poisoned,
            poisoned_docs: poisoned,
            poison_proportion: if total == 0 {
                0.0
            } else {
                poisoned as f64 / total as f64
            },
            by_origin,
        }
    }
}

/// Loads a clean corpus from JSONL (`{"id", "text", "title"?}` per line).
/// Blank lines are skipped. Whatever origin flags the file carries are
/// overridden: everything ingested here is clean by definition.
pub fn ingest_corpus(path: &Path) -> Result<Store> {
    let file = File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open corpus {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut store = Store::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("bad document record: {e}")))?;
        doc.origin = Origin::Clean;
        doc.poisoned = false;
        doc.source_tag = None;
        store.push(doc).map_err(|e| match e {
            Error::Conflict(msg) => Error::parse(path, lineno, msg),
            other => other,
        })?;
    }
    Ok(store)
}

/// Writes every document (clean and poisoned, full metadata) as JSONL.
/// Ingesting an exported clean corpus reproduces the same document multiset.
pub fn export_corpus(store: &Store, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for doc in store.docs() {
        serde_json::to_writer(&mut w, doc)
            .map_err(|e| Error::InvalidInput(format!("serialize {}: {e}", doc.doc_id)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a query set from JSONL, validating each case and rejecting duplicate
/// ids.
pub fn load_queries(path: &Path) -> Result<Vec<QueryCase>> {
    let file = File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open query set {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut queries = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: QueryCase = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("bad query record: {e}")))?;
        case.validate()
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if seen.insert(case.id.clone(), ()).is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate query id {}", case.id)));
        }
        queries.push(case);
    }
    Ok(queries)
}

/// Splits `text` into windows of at most `max_tokens` whitespace tokens,
/// consecutive windows sharing `overlap` tokens. Chunks are slices of the
/// original string (inner whitespace preserved); a text that already fits in
/// one window is returned verbatim.
pub fn chunk_text(text: &str, max_tokens: usize, overlap: usize) -> Result<Vec<String>> {
    if max_tokens == 0 {
        return Err(Error::InvalidInput("chunk_text: max_tokens must be >= 1".into()));
    }
    if overlap >= max_tokens {
        return Err(Error::InvalidInput(format!(
            "chunk_text: overlap {overlap} must be smaller than max_tokens {max_tokens}"
        )));
    }
    let spans = token_spans(text);
    let n = spans.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n <= max_tokens {
        return Ok(vec![text.to_string()]);
    }
    let stride = max_tokens - overlap;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + max_tokens).min(n);
        let (byte_start, _) = spans[start];
        let (_, byte_end) = spans[end - 1];
        chunks.push(text[byte_start..byte_end].to_string());
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}
