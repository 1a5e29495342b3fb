//! Black-box corpus poisoning against retrieval-augmented generation, with
//! the machinery to measure it.
//!
//! The toolkit covers the full loop: ingest a document corpus, craft
//! adversarial documents per query through a chat-model gateway, inject them,
//! retrieve over the poisoned corpus with BM25 or dense search, answer
//! through a defended or undefended RAG pipeline, and score the damage.
//!
//! Module map:
//! - [`corpus`]: document store, query sets, poison injection, chunking.
//! - [`retrieval`]: BM25 and exact dense indexes behind one trait.
//! - [`gateway`]: prompt templates, chat providers (HTTP and scripted),
//!   retry policy.
//! - [`prompts`]: the bundled template assets by name.
//! - [`attack`]: wrong-answer generation, query decomposition, retrieval
//!   rationales, poison-document crafting, the prepend baseline.
//! - [`rag`]: the answering pipeline plus the rerank and confidence-gate
//!   defenses.
//! - [`eval`]: per-query outcomes, headline metrics, naturalness judging,
//!   paired significance tests, report assembly.
//! - [`config`]: experiment TOML, config hashing, the run manifest.
//! - [`orchestrator`]: the attack/run/stats/report commands the CLI exposes.
//!
//! Runs are deterministic for a fixed config: a single master seed drives all
//! sampling, reports carry no wall-clock state, and scripted providers make
//! the whole pipeline runnable offline.

pub mod attack;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod orchestrator;
pub mod prompts;
pub mod rag;
pub mod retrieval;
pub mod text;

pub use error::{Error, Result};
