//! Tokenization and string predicates shared by retrieval, attack validation,
//! and the confidence-gate defense.

use std::collections::BTreeSet;

/// Fixed stopword list used when reducing a question to its content terms.
/// Exactly 50 entries; changing it shifts the content-term overlap metrics,
/// so it is frozen rather than configurable.
pub const STOPWORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "if", "of", "at", "by", "for", "with", "about", "into",
    "through", "during", "before", "after", "to", "from", "in", "on", "is", "are", "was", "were",
    "be", "been", "do", "does", "did", "have", "has", "had", "what", "which", "who", "whom",
    "whose", "where", "when", "why", "how", "this", "that", "these", "those", "it", "its", "as",
];

/// Lowercases and splits on non-alphanumeric characters. No stemming, no
/// stopword removal; empty runs are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lower in ch.to_lowercase() {
                current.push(lower);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Byte spans of whitespace-delimited tokens, in order. Used by the chunker so
/// chunks can be cut from the original string without re-joining tokens.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Distinct non-stopword tokens of a text. Set semantics: multiplicity never
/// matters for the overlap ratios built on top of this.
pub fn content_terms(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Trims and collapses internal whitespace runs to single spaces.
pub fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-insensitive substring test.
pub fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

/// Bidirectional containment after whitespace collapsing and lowercasing:
/// true when either string contains the other. This is the test a candidate
/// wrong answer must FAIL against every gold answer.
pub fn answers_overlap(a: &str, b: &str) -> bool {
    let a = collapse_ws(a).to_lowercase();
    let b = collapse_ws(b).to_lowercase();
    if a.is_empty() || b.is_empty() {
        // An empty candidate is never a usable wrong answer; treat it as
        // overlapping so validation rejects it.
        return true;
    }
    a.contains(&b) || b.contains(&a)
}
