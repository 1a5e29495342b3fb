use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure classes the
/// pipeline distinguishes when deciding whether to retry, fall back, or abort.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed line in a JSONL file. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Duplicate document id, either against the store or within a batch.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Network-level failure after all retries were spent.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    /// Well-formed response that violates the wire contract (missing fields,
    /// inconsistent embedding dimensions, non-permutation ranker output, ...).
    #[error("schema violation: {0}")]
    Schema(String),

    /// Template rendering failed; names the offending placeholder.
    #[error("template placeholder unbound or unresolved: {{{placeholder}}}")]
    Template { placeholder: String },

    /// Scripted provider had no exchange left matching the rendered prompt.
    #[error("no scripted exchange matches prompt: {0}")]
    UnmatchedPrompt(String),

    /// Provider returned an empty or whitespace-only completion.
    #[error("provider returned empty output")]
    EmptyOutput,

    /// No balanced JSON block could be pulled out of a completion.
    #[error("no valid JSON block in completion: {0}")]
    Extraction(String),

    /// A regeneration loop ran out of attempts without satisfying its constraint.
    #[error("validation exhausted after {attempts} attempt(s): {constraint}")]
    ValidationExhausted { constraint: String, attempts: usize },

    /// Judge never produced a parseable score.
    #[error("judging failed: {0}")]
    Judging(String),

    /// A defense stage failed (e.g. ranker error mid-tournament).
    #[error("defense failure: {0}")]
    Defense(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for JSONL parse failures.
    pub fn parse(path: &std::path::Path, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            message: message.to_string(),
        }
    }
}
