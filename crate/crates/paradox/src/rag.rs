//! The defended (or undefended) RAG answering pipeline: retrieve, optionally
//! filter through a defense, build the reader prompt, and grade the reply.
//!
//! Two defenses are implemented. Tournament reranking funnels a large
//! retrieval pool through a list-wise ranker in seeded elimination rounds.
//! The confidence gate answers closed-book whenever the top hit looks too
//! weak or too far off the question's vocabulary.

use serde::{Deserialize, Serialize};

use crate::corpus::{QueryCase, Store};
use crate::error::{Error, Result};
use crate::gateway::{bindings, ChatProvider, GenerationConfig, RenderedPrompt};
use crate::prompts::{names, TemplateSet};
use crate::retrieval::{ScoredDoc, SearchIndex};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    Rerank,
    Confidence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Retrieval pool fed to the tournament.
    pub rerank_pool: usize,
    /// Documents surviving the tournament.
    pub rerank_out: usize,
    /// Largest candidate list one ranker call may see.
    pub list_size: usize,
    /// Minimum top-1 retrieval score for the confidence gate.
    pub confidence_threshold: f64,
    /// Minimum shared-content-term fraction for the confidence gate.
    pub overlap_tau: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            rerank_pool: 50,
            rerank_out: 5,
            list_size: 5,
            confidence_threshold: 1.0,
            overlap_tau: 0.3,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rerank_out == 0 || self.rerank_out > self.rerank_pool {
            return Err(Error::Config(format!(
                "rerank_out {} must be in 1..={}",
                self.rerank_out, self.rerank_pool
            )));
        }
        if self.list_size < 2 {
            return Err(Error::Config("list_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_tau) {
            return Err(Error::Config("overlap_tau must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// List-wise ranking backend: orders candidate (id, text) pairs for a query.
/// The output must be a permutation of the input ids.
pub trait RankerClient: Send + Sync {
    fn order(&self, query: &str, candidates: &[(String, String)]) -> Result<Vec<String>>;

    fn describe(&self) -> String;
}

/// Keeps the given order. Useful as a no-op ranker and in tests.
pub struct IdentityRanker;

impl RankerClient for IdentityRanker {
    fn order(&self, _query: &str, candidates: &[(String, String)]) -> Result<Vec<String>> {
        Ok(candidates.iter().map(|(id, _)| id.clone()).collect())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Orders by shared-content-term count with the query (descending), original
/// order on ties. A deterministic offline stand-in for a listwise model.
pub struct LexicalRanker;

impl RankerClient for LexicalRanker {
    fn order(&self, query: &str, candidates: &[(String, String)]) -> Result<Vec<String>> {
        let q_terms = text::content_terms(query);
        let mut scored: Vec<(usize, &(String, String))> = candidates
            .iter()
            .map(|c| {
                let d_terms = text::content_terms(&c.1);
                (q_terms.intersection(&d_terms).count(), c)
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0));
        Ok(scored.into_iter().map(|(_, (id, _))| id.clone()).collect())
    }

    fn describe(&self) -> String {
        "lexical".into()
    }
}

#[derive(Serialize)]
struct RankRequestCandidate<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct RankRequest<'a> {
    query: &'a str,
    candidates: Vec<RankRequestCandidate<'a>>,
}

#[derive(Deserialize)]
struct RankResponse {
    order: Vec<String>,
}

/// Remote listwise ranker speaking `{query, candidates:[{id,text}]}` in and
/// `{order:[ids]}` out.
pub struct HttpRanker {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpRanker {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpRanker {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl RankerClient for HttpRanker {
    fn order(&self, query: &str, candidates: &[(String, String)]) -> Result<Vec<String>> {
        let body = RankRequest {
            query,
            candidates: candidates
                .iter()
                .map(|(id, t)| RankRequestCandidate { id, text: t })
                .collect(),
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| Error::Transport {
                attempts: 1,
                message: format!("ranker {}: {e}", self.endpoint),
            })?;
        if !resp.status().is_success() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!("ranker {}: {}", self.endpoint, resp.status()),
            });
        }
        let parsed: RankResponse = resp
            .json()
            .map_err(|e| Error::Schema(format!("ranker response: {e}")))?;
        Ok(parsed.order)
    }

    fn describe(&self) -> String {
        format!("http:{}", self.endpoint)
    }
}

/// Result of a tournament, with enough bookkeeping for audits and tests.
#[derive(Debug, Clone)]
pub struct RerankOutcome {
    /// Exactly `min(rerank_out, pool size)` unique ids from the pool.
    pub ids: Vec<String>,
    /// Elimination rounds before the final ordering call.
    pub rounds: usize,
    pub ranker_calls: usize,
}

/// Checks that `ordered` is a permutation of the candidate ids.
fn check_permutation(ordered: &[String], group: &[(String, String)]) -> Result<()> {
    if ordered.len() != group.len() {
        return Err(Error::Schema(format!(
            "ranker returned {} ids for {} candidates",
            ordered.len(),
            group.len()
        )));
    }
    let mut expected: Vec<&str> = group.iter().map(|(id, _)| id.as_str()).collect();
    let mut got: Vec<&str> = ordered.iter().map(|s| s.as_str()).collect();
    expected.sort_unstable();
    got.sort_unstable();
    if expected != got {
        return Err(Error::Schema("ranker output is not a permutation of its input".into()));
    }
    Ok(())
}

/// Funnels `pool` (already in retrieval order) down to `rerank_out` ids.
///
/// Each elimination round splits the field into `G = ceil(n / list_size)`
/// seeded groups (doc i joins group i mod G, so every group spans the rank
/// spectrum), has the ranker order each group, then advances the best
/// `max(ceil(n/2), rerank_out)` docs by merging group results rank-level by
/// rank-level. The clamp keeps the field from undershooting `rerank_out`.
/// With an identity ranker every round preserves the incoming order, so the
/// survivors are exactly the pool's top docs. A final call orders the
/// survivors. Any ranker failure aborts the defense (callers fall back to the
/// undefended pipeline and flag the query).
pub fn tournament_rerank(
    query: &str,
    pool: &[(String, String)],
    ranker: &dyn RankerClient,
    cfg: &DefenseConfig,
) -> Result<RerankOutcome> {
    cfg.validate()?;
    {
        let mut ids: Vec<&str> = pool.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != pool.len() {
            return Err(Error::InvalidInput("rerank pool contains duplicate ids".into()));
        }
    }
    let defense_err = |e: Error| Error::Defense(format!("tournament ranker: {e}"));

    let mut candidates: Vec<(String, String)> = pool.to_vec();
    let mut rounds = 0usize;
    let mut ranker_calls = 0usize;

    while candidates.len() > cfg.rerank_out {
        let n = candidates.len();
        let group_count = n.div_ceil(cfg.list_size);
        let mut ordered_groups: Vec<Vec<(String, String)>> = Vec::with_capacity(group_count);
        for j in 0..group_count {
            let group: Vec<(String, String)> = candidates
                .iter()
                .skip(j)
                .step_by(group_count)
                .cloned()
                .collect();
            let order = ranker.order(query, &group).map_err(defense_err)?;
            ranker_calls += 1;
            check_permutation(&order, &group).map_err(defense_err)?;
            let ordered = order
                .into_iter()
                .map(|id| {
                    let text = group.iter().find(|(gid, _)| *gid == id).unwrap().1.clone();
                    (id, text)
                })
                .collect();
            ordered_groups.push(ordered);
        }
        // Merge winners-first: all rank-1 docs (group order), then rank-2s, ...
        let keep = (n.div_ceil(2)).max(cfg.rerank_out);
        let max_len = ordered_groups.iter().map(Vec::len).max().unwrap_or(0);
        let mut merged = Vec::with_capacity(n);
        for level in 0..max_len {
            for group in &ordered_groups {
                if let Some(entry) = group.get(level) {
                    merged.push(entry.clone());
                }
            }
        }
        merged.truncate(keep);
        candidates = merged;
        rounds += 1;
    }

    // Final ordering pass over the survivors, when one call can see them all.
    if candidates.len() <= cfg.list_size && !candidates.is_empty() {
        let order = ranker.order(query, &candidates).map_err(defense_err)?;
        ranker_calls += 1;
        check_permutation(&order, &candidates).map_err(defense_err)?;
        let by_id: std::collections::HashMap<String, String> = candidates.drain(..).collect();
        candidates = order
            .into_iter()
            .map(|id| {
                let text = by_id[&id].clone();
                (id, text)
            })
            .collect();
    }
    candidates.truncate(cfg.rerank_out);
    Ok(RerankOutcome {
        ids: candidates.into_iter().map(|(id, _)| id).collect(),
        rounds,
        ranker_calls,
    })
}

/// Confidence-gate decision for one query.
#[derive(Debug, Clone, Serialize)]
pub struct GateDecision {
    pub keep: bool,
    pub top1_score: f64,
    pub overlap: f64,
}

/// Pure filter: keep the retrieved context only when the top hit scores at
/// least `confidence_threshold` AND shares at least `overlap_tau` of the
/// question's content terms. A question with no content terms never passes.
pub fn confidence_gate(
    question: &str,
    ranked: &[ScoredDoc],
    store: &Store,
    cfg: &DefenseConfig,
) -> Result<GateDecision> {
    let Some(top) = ranked.first() else {
        return Ok(GateDecision {
            keep: false,
            top1_score: f64::NEG_INFINITY,
            overlap: 0.0,
        });
    };
    let doc = store.require(&top.doc_id)?;
    let q_terms = text::content_terms(question);
    let overlap = if q_terms.is_empty() {
        0.0
    } else {
        let d_terms = text::content_terms(&doc.text);
        q_terms.intersection(&d_terms).count() as f64 / q_terms.len() as f64
    };
    Ok(GateDecision {
        keep: top.score >= cfg.confidence_threshold && overlap >= cfg.overlap_tau,
        top1_score: top.score,
        overlap,
    })
}

/// Reader output for one query, as persisted in the answers artifact.
/// `defense` records what actually ran: a rerank failure falls back to
/// `none`, with the failure preserved in `defense_note`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RagAnswer {
    pub query_id: String,
    pub response_text: String,
    /// Ids whose texts were placed in the prompt, in prompt order.
    pub used_docs: Vec<String>,
    pub defense: DefenseKind,
    pub closed_book: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense_note: Option<String>,
}

/// Renders options one per line as `LABEL) text`.
fn render_options(options: &[crate::corpus::OptionEntry]) -> String {
    options
        .iter()
        .map(|o| format!("{}) {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds the reader prompt for a question over the given document texts.
/// Multiple-choice questions use the options variant; texts are joined in
/// rank order, separated by newlines.
pub fn build_reader_prompt(
    q: &QueryCase,
    question: &str,
    doc_texts: &[String],
    templates: &TemplateSet,
) -> Result<RenderedPrompt> {
    let documents = doc_texts.join("\n");
    match &q.options {
        Some(options) => {
            let rendered_options = render_options(options);
            templates.get(names::QA_MULTIPLE_CHOICE)?.render(&bindings([
                ("documents", documents.as_str()),
                ("question", question),
                ("options", rendered_options.as_str()),
            ]))
        }
        None => templates.get(names::QA_OPEN)?.render(&bindings([
            ("documents", documents.as_str()),
            ("question", question),
        ])),
    }
}

/// Runs one query end to end: retrieve, apply the configured defense, prompt
/// the reader. `use_paraphrase` swaps in the paraphrased surface form for
/// retrieval and prompting (the attack only ever saw the original).
///
/// Returns the answer record plus the context actually handed to the reader,
/// in prompt order, each doc carrying its retrieval score. A closed-book
/// answer has an empty context.
#[allow(clippy::too_many_arguments)]
pub fn answer_query(
    q: &QueryCase,
    index: &dyn SearchIndex,
    store: &Store,
    generator: &dyn ChatProvider,
    templates: &TemplateSet,
    k: usize,
    defense: &DefenseConfig,
    ranker: Option<&dyn RankerClient>,
    answering_cfg: &GenerationConfig,
    use_paraphrase: bool,
) -> Result<(RagAnswer, Vec<ScoredDoc>)> {
    let question = q.surface_question(use_paraphrase);
    let mut defense_note = None;
    let mut closed_book = false;

    let (context, applied_defense) = match defense.kind {
        DefenseKind::None => (index.retrieve(question, k)?, DefenseKind::None),
        DefenseKind::Rerank => {
            let ranker = ranker.ok_or_else(|| {
                Error::Config("rerank defense requires a ranker provider".into())
            })?;
            let ranked = index.retrieve(question, defense.rerank_pool)?;
            let pool: Vec<(String, String)> = ranked
                .iter()
                .map(|s| Ok((s.doc_id.clone(), store.require(&s.doc_id)?.text.clone())))
                .collect::<Result<_>>()?;
            match tournament_rerank(question, &pool, ranker, defense) {
                Ok(outcome) => {
                    let survivors = outcome
                        .ids
                        .into_iter()
                        .map(|id| {
                            let score =
                                ranked.iter().find(|s| s.doc_id == id).unwrap().score;
                            ScoredDoc { doc_id: id, score }
                        })
                        .collect();
                    (survivors, DefenseKind::Rerank)
                }
                Err(Error::Defense(msg)) => {
                    // Defense failed; answer undefended and flag the query.
                    defense_note = Some(msg);
                    let top_k = ranked.into_iter().take(k).collect();
                    (top_k, DefenseKind::None)
                }
                Err(other) => return Err(other),
            }
        }
        DefenseKind::Confidence => {
            let ranked = index.retrieve(question, k)?;
            let decision = confidence_gate(question, &ranked, store, defense)?;
            if decision.keep {
                (ranked, DefenseKind::Confidence)
            } else {
                closed_book = true;
                (Vec::new(), DefenseKind::Confidence)
            }
        }
    };

    let used_ids: Vec<String> = context.iter().map(|s| s.doc_id.clone()).collect();
    let doc_texts: Vec<String> = used_ids
        .iter()
        .map(|id| Ok(store.require(id)?.text.clone()))
        .collect::<Result<_>>()?;
    let prompt = build_reader_prompt(q, question, &doc_texts, templates)?;
    let response = generator.chat(&prompt, answering_cfg)?;
    if response.trim().is_empty() {
        return Err(Error::EmptyOutput);
    }
    let answer = RagAnswer {
        query_id: q.id.clone(),
        response_text: response,
        used_docs: used_ids,
        defense: applied_defense,
        closed_book,
        defense_note,
    };
    Ok((answer, context))
}

/// Word-boundary occurrence check, case-sensitive. Labels are single tokens
/// like "A" or "B"; case-insensitivity would false-positive on the article
/// "a".
fn contains_word(haystack: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(word) {
        let abs = start + pos;
        let end = abs + word.len();
        let before_ok = abs == 0
            || !haystack[..abs].chars().next_back().is_some_and(char::is_alphanumeric);
        let after_ok = end == haystack.len()
            || !haystack[end..].chars().next().is_some_and(char::is_alphanumeric);
        if before_ok && after_ok {
            return true;
        }
        start = abs + 1;
    }
    false
}

/// Grades a reader response. Open-ended: correct iff any gold answer appears
/// as a case-insensitive substring after whitespace collapsing (so "pariser"
/// matches "Paris"; the permissive rule is deliberate). Multiple-choice:
/// correct iff a gold option's label appears on a word boundary or a gold
/// option's full text appears as a substring.
pub fn extract_answer(response: &str, q: &QueryCase) -> bool {
    let hay = text::collapse_ws(response).to_lowercase();
    match &q.options {
        Some(options) => {
            let gold_options: Vec<&crate::corpus::OptionEntry> = options
                .iter()
                .filter(|o| {
                    q.answers.iter().any(|a| {
                        a == &o.label
                            || text::collapse_ws(a).to_lowercase()
                                == text::collapse_ws(&o.text).to_lowercase()
                    })
                })
                .collect();
            if gold_options.is_empty() {
                // Gold answers that name no option: grade as open-ended.
                return q
                    .answers
                    .iter()
                    .any(|a| hay.contains(&text::collapse_ws(a).to_lowercase()));
            }
            let collapsed = text::collapse_ws(response);
            gold_options.iter().any(|o| {
                contains_word(&collapsed, &o.label)
                    || hay.contains(&text::collapse_ws(&o.text).to_lowercase())
            })
        }
        None => q
            .answers
            .iter()
            .any(|a| hay.contains(&text::collapse_ws(a).to_lowercase())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::OptionEntry;
    use crate::gateway::{Matcher, ScriptedExchange, ScriptedProvider};
    use crate::retrieval::{build_bm25_index, Bm25Params};

    fn pool_of(n: usize) -> Vec<(String, String)> {
        (0..n)
            .map(|i| (format!("d{i:02}"), format!("text {i}")))
            .collect()
    }

    #[test]
    fn tournament_identity_keeps_top_five_of_fifty_in_four_rounds() {
        let pool = pool_of(50);
        let cfg = DefenseConfig {
            kind: DefenseKind::Rerank,
            ..DefenseConfig::default()
        };
        let outcome = tournament_rerank("q", &pool, &IdentityRanker, &cfg).unwrap();
        assert_eq!(outcome.rounds, 4);
        assert_eq!(outcome.ids, vec!["d00", "d01", "d02", "d03", "d04"]);
    }

    #[test]
    fn tournament_small_pool_is_single_ranker_call() {
        let pool = pool_of(5);
        let cfg = DefenseConfig::default();
        let outcome = tournament_rerank("q", &pool, &IdentityRanker, &cfg).unwrap();
        assert_eq!(outcome.rounds, 0);
        assert_eq!(outcome.ranker_calls, 1);
        assert_eq!(outcome.ids.len(), 5);
    }

    #[test]
    fn tournament_output_size_is_min_of_out_and_pool() {
        let cfg = DefenseConfig::default();
        for n in [1usize, 3, 5, 6, 7, 11, 23, 50, 64] {
            let outcome = tournament_rerank("q", &pool_of(n), &IdentityRanker, &cfg).unwrap();
            assert_eq!(outcome.ids.len(), n.min(5), "pool size {n}");
            let unique: std::collections::HashSet<_> = outcome.ids.iter().collect();
            assert_eq!(unique.len(), outcome.ids.len());
        }
    }

    /// Always places one fixed id first, identity otherwise.
    struct PinFirst(&'static str);

    impl RankerClient for PinFirst {
        fn order(&self, _q: &str, candidates: &[(String, String)]) -> Result<Vec<String>> {
            let mut ids: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
            if let Some(pos) = ids.iter().position(|id| id == self.0) {
                let pinned = ids.remove(pos);
                ids.insert(0, pinned);
            }
            Ok(ids)
        }

        fn describe(&self) -> String {
            format!("pin:{}", self.0)
        }
    }

    #[test]
    fn tournament_pinned_doc_survives_from_any_seed_position() {
        let cfg = DefenseConfig::default();
        for pinned in ["d00", "d17", "d31", "d49"] {
            let ranker = PinFirst(Box::leak(pinned.to_string().into_boxed_str()));
            let outcome = tournament_rerank("q", &pool_of(50), &ranker, &cfg).unwrap();
            assert_eq!(outcome.ids[0], pinned, "pinned {pinned}");
        }
    }

    struct FailingRanker;

    impl RankerClient for FailingRanker {
        fn order(&self, _q: &str, _c: &[(String, String)]) -> Result<Vec<String>> {
            Err(Error::Transport {
                attempts: 1,
                message: "ranker down".into(),
            })
        }

        fn describe(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn tournament_wraps_ranker_failures_as_defense_errors() {
        let cfg = DefenseConfig::default();
        let err = tournament_rerank("q", &pool_of(50), &FailingRanker, &cfg).unwrap_err();
        assert!(matches!(err, Error::Defense(_)));
    }

    struct DroppingRanker;

    impl RankerClient for DroppingRanker {
        fn order(&self, _q: &str, candidates: &[(String, String)]) -> Result<Vec<String>> {
            Ok(candidates.iter().skip(1).map(|(id, _)| id.clone()).collect())
        }

        fn describe(&self) -> String {
            "dropping".into()
        }
    }

    #[test]
    fn tournament_rejects_non_permutation_output() {
        let cfg = DefenseConfig::default();
        let err = tournament_rerank("q", &pool_of(50), &DroppingRanker, &cfg).unwrap_err();
        assert!(matches!(err, Error::Defense(_)));
    }

    fn store_with(texts: &[(&str, &str)]) -> Store {
        let mut store = Store::new();
        for (id, text) in texts {
            store.add_clean(*id, *text).unwrap();
        }
        store
    }

    #[test]
    fn confidence_gate_checks_score_and_overlap() {
        let store = store_with(&[("d1", "the eiffel tower stands in paris france")]);
        let cfg = DefenseConfig {
            confidence_threshold: 1.0,
            overlap_tau: 0.3,
            ..DefenseConfig::default()
        };
        let ranked = vec![ScoredDoc { doc_id: "d1".into(), score: 2.0 }];
        let d = confidence_gate("where is the eiffel tower", &ranked, &store, &cfg).unwrap();
        assert!(d.keep);
        assert!(d.overlap >= 0.5);

        let weak = vec![ScoredDoc { doc_id: "d1".into(), score: 0.5 }];
        assert!(!confidence_gate("where is the eiffel tower", &weak, &store, &cfg).unwrap().keep);

        let d = confidence_gate("quantum chromodynamics lattice", &ranked, &store, &cfg).unwrap();
        assert!(!d.keep, "off-topic question must fail the overlap test");

        assert!(!confidence_gate("anything", &[], &store, &cfg).unwrap().keep);
    }

    fn open_query() -> QueryCase {
        QueryCase {
            id: "q1".into(),
            question: "where is the eiffel tower".into(),
            answers: vec!["Paris".into()],
            options: None,
            wrong_answer: None,
            paraphrase: Some("in which city does the eiffel tower stand".into()),
        }
    }

    #[test]
    fn answer_query_without_defense_uses_top_k_in_rank_order() {
        let store = store_with(&[
            ("a", "the eiffel tower is in paris"),
            ("b", "the tower is tall"),
            ("c", "unrelated text about cheese"),
        ]);
        let index = build_bm25_index(&store, Bm25Params::default()).unwrap();
        let provider = ScriptedProvider::new(
            "gen",
            vec![ScriptedExchange {
                matcher: Matcher::Substring("[INST] Documents:".into()),
                response: "Paris".into(),
                times: None,
            }],
        );
        let templates = TemplateSet::builtin();
        let (answer, _context) = answer_query(
            &open_query(),
            &index,
            &store,
            &provider,
            &templates,
            2,
            &DefenseConfig::default(),
            None,
            &GenerationConfig::answering(),
            false,
        )
        .unwrap();
        assert_query_shape(&answer);
        assert_eq!(answer.used_docs.len(), 2);
        assert!(!answer.closed_book);
        // prompt carries the doc texts in rank order
        let transcript = provider.transcript();
        let body = &transcript[0].user;
        let pos_a = body.find("the eiffel tower is in paris").unwrap();
        let pos_b = body.find("the tower is tall").unwrap();
        assert!(pos_a < pos_b);
        assert!(body.contains("Question: where is the eiffel tower [/INST]"));
    }

    fn assert_query_shape(answer: &RagAnswer) {
        assert_eq!(answer.query_id, "q1");
        assert_eq!(answer.defense, DefenseKind::None);
        assert!(answer.defense_note.is_none());
    }

    #[test]
    fn answer_query_confidence_gate_can_go_closed_book() {
        let store = store_with(&[("a", "totally unrelated document about trains")]);
        let index = build_bm25_index(&store, Bm25Params::default()).unwrap();
        let provider = ScriptedProvider::new(
            "gen",
            vec![ScriptedExchange {
                matcher: Matcher::Substring("[INST] Documents:".into()),
                response: "I do not know".into(),
                times: None,
            }],
        );
        let templates = TemplateSet::builtin();
        let defense = DefenseConfig {
            kind: DefenseKind::Confidence,
            confidence_threshold: 0.5,
            overlap_tau: 0.3,
            ..DefenseConfig::default()
        };
        let (answer, _context) = answer_query(
            &open_query(),
            &index,
            &store,
            &provider,
            &templates,
            1,
            &defense,
            None,
            &GenerationConfig::answering(),
            false,
        )
        .unwrap();
        assert!(answer.closed_book);
        assert!(answer.used_docs.is_empty());
        assert_eq!(answer.defense, DefenseKind::Confidence);
    }

    #[test]
    fn answer_query_rerank_failure_falls_back_and_flags() {
        let store = store_with(&[
            ("a", "the eiffel tower is in paris"),
            ("b", "the eiffel tower is tall"),
        ]);
        let index = build_bm25_index(&store, Bm25Params::default()).unwrap();
        let provider = ScriptedProvider::new(
            "gen",
            vec![ScriptedExchange {
                matcher: Matcher::Substring("[INST] Documents:".into()),
                response: "Paris".into(),
                times: None,
            }],
        );
        let templates = TemplateSet::builtin();
        let defense = DefenseConfig {
            kind: DefenseKind::Rerank,
            rerank_pool: 2,
            rerank_out: 1,
            ..DefenseConfig::default()
        };
        let (answer, _context) = answer_query(
            &open_query(),
            &index,
            &store,
            &provider,
            &templates,
            1,
            &defense,
            Some(&FailingRanker),
            &GenerationConfig::answering(),
            false,
        )
        .unwrap();
        assert_eq!(answer.defense, DefenseKind::None);
        assert!(answer.defense_note.is_some());
        assert_eq!(answer.used_docs.len(), 1);
    }

    #[test]
    fn answer_query_uses_paraphrase_surface_when_asked() {
        let store = store_with(&[("a", "the eiffel tower is in paris")]);
        let index = build_bm25_index(&store, Bm25Params::default()).unwrap();
        let provider = ScriptedProvider::new(
            "gen",
            vec![ScriptedExchange {
                matcher: Matcher::Substring("in which city".into()),
                response: "Paris".into(),
                times: None,
            }],
        );
        let templates = TemplateSet::builtin();
        let (answer, _context) = answer_query(
            &open_query(),
            &index,
            &store,
            &provider,
            &templates,
            1,
            &DefenseConfig::default(),
            None,
            &GenerationConfig::answering(),
            true,
        )
        .unwrap();
        assert!(answer.response_text.contains("Paris"));
    }

    #[test]
    fn extract_answer_open_is_substring_based() {
        let q = open_query();
        assert!(extract_answer("The answer is Paris.", &q));
        assert!(extract_answer("pariser", &q), "permissive substring rule");
        assert!(!extract_answer("London", &q));
        assert!(extract_answer("par is close... no: PARIS", &q));
    }

    fn mc_query() -> QueryCase {
        QueryCase {
            id: "q2".into(),
            question: "Which metal is liquid at room temperature?".into(),
            answers: vec!["B".into()],
            options: Some(vec![
                OptionEntry { label: "A".into(), text: "Iron".into() },
                OptionEntry { label: "B".into(), text: "Mercury".into() },
                OptionEntry { label: "C".into(), text: "Gold".into() },
                OptionEntry { label: "D".into(), text: "Copper".into() },
            ]),
            wrong_answer: None,
            paraphrase: None,
        }
    }

    #[test]
    fn extract_answer_mc_matches_label_or_option_text() {
        let q = mc_query();
        assert!(extract_answer("B", &q));
        assert!(extract_answer("B) Mercury", &q));
        assert!(extract_answer("The answer is mercury.", &q));
        assert!(!extract_answer("A) Iron", &q));
        assert!(!extract_answer("Beryllium", &q), "label must sit on a word boundary");
        assert!(!extract_answer("a bird", &q), "lowercase article is not label A");
    }

    #[test]
    fn extract_answer_mc_accepts_gold_given_as_option_text() {
        let mut q = mc_query();
        q.answers = vec!["Mercury".into()];
        assert!(extract_answer("I pick B", &q));
        assert!(extract_answer("mercury is the one", &q));
        assert!(!extract_answer("C", &q));
    }

    #[test]
    fn reader_prompt_renders_all_options() {
        let templates = TemplateSet::builtin();
        let q = mc_query();
        let prompt = build_reader_prompt(&q, &q.question, &[], &templates).unwrap();
        assert!(prompt.user.contains("Options: A) Iron\nB) Mercury\nC) Gold\nD) Copper"));
    }
}
