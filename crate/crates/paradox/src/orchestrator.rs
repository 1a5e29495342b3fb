//! Command implementations behind the CLI: craft poison, run evaluations,
//! compare runs, merge reports.
//!
//! Commands fail soft at query granularity: one bad query is recorded and
//! skipped, the run continues, and the caller maps recorded failures to a
//! partial-success exit. Stage-level failures (unreadable corpus, missing
//! providers) abort. Reruns with an unchanged config hash resume from the
//! manifest instead of repeating finished work.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::{
    generate_wrong_answer, load_poison_set, load_poison_sets, paraphrase_query,
    poison_file_name, save_poison_set, AttackContext, AttackStrategy, ParadoxAttack,
    PoisonSet, PrependAttack,
};
use crate::config::{
    tool_tag, AttackKind, EmbedderConfig, EmbedderKind, ExperimentConfig, ProviderConfig,
    ProviderKind, RankerConfig, RankerKind, RetrieverKind, RunManifest,
};
use crate::corpus::{ingest_corpus, load_queries, QueryCase, Store};
use crate::error::{Error, Result};
use crate::eval::report::{build_report, render_csv, render_text, PerQueryRow, Report};
use crate::eval::stats::{ttest_from_diffs, PairedStats};
use crate::eval::{judge_nes, ndcg_at_k, NesSample, QueryOutcome};
use crate::gateway::{ChatProvider, GenerationConfig, HttpChatProvider, ScriptedProvider};
use crate::prompts::TemplateSet;
use crate::rag::{
    answer_query, extract_answer, HttpRanker, IdentityRanker, LexicalRanker,
    RagAnswer, RankerClient,
};
use crate::retrieval::{
    build_bm25_index, build_dense_index, EmbeddingClient, HashedEmbedder, HttpEmbedder,
    RetrievalResult, SearchIndex,
};

/// Runs `f` over `items` on a small worker pool, preserving input order in
/// the output. `workers == 1` degrades to a plain sequential map.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Backend construction
// ---------------------------------------------------------------------------

pub fn build_chat_provider(role: &str, cfg: &ProviderConfig) -> Result<Box<dyn ChatProvider>> {
    match cfg.kind {
        ProviderKind::Scripted => {
            let path = cfg.fixtures.as_ref().ok_or_else(|| {
                Error::Config(format!("{role}: scripted provider needs a fixtures path"))
            })?;
            Ok(Box::new(ScriptedProvider::from_jsonl(role, path)?))
        }
        ProviderKind::Http => {
            let endpoint = cfg.endpoint.clone().ok_or_else(|| {
                Error::Config(format!("{role}: http provider needs an endpoint"))
            })?;
            let model = cfg.model.clone().unwrap_or_else(|| "default".to_string());
            let api_key = read_api_key(role, cfg.api_key_env.as_deref())?;
            Ok(Box::new(
                HttpChatProvider::new(endpoint, model)
                    .with_api_key(api_key)
                    .with_backoff_ms(cfg.backoff_ms),
            ))
        }
    }
}

/// Resolves the key variable if one is named. The config never holds the key
/// itself, only the variable name.
fn read_api_key(role: &str, var: Option<&str>) -> Result<Option<String>> {
    match var {
        None => Ok(None),
        Some(var) => std::env::var(var).map(Some).map_err(|_| {
            Error::Config(format!("{role}: environment variable {var} is not set"))
        }),
    }
}

/// Role defaults overlaid with the provider's explicit settings.
fn role_generation_cfg(base: GenerationConfig, p: &ProviderConfig) -> GenerationConfig {
    let mut cfg = base;
    if let Some(t) = p.temperature {
        cfg.temperature = t;
    }
    if let Some(mt) = p.max_tokens {
        cfg.max_tokens = mt;
    }
    cfg.max_retries = p.max_retries;
    cfg
}

fn build_embedder(cfg: &EmbedderConfig, dim: usize) -> Result<Box<dyn EmbeddingClient>> {
    match cfg.kind {
        EmbedderKind::Hashed => Ok(Box::new(HashedEmbedder::new(dim))),
        EmbedderKind::Http => {
            let endpoint = cfg.endpoint.clone().ok_or_else(|| {
                Error::Config("embedder: http kind needs an endpoint".into())
            })?;
            let model = cfg.model.clone().unwrap_or_else(|| "default".to_string());
            let api_key = read_api_key("embedder", cfg.api_key_env.as_deref())?;
            Ok(Box::new(HttpEmbedder::new(endpoint, model).with_api_key(api_key)))
        }
    }
}

fn build_ranker(cfg: &RankerConfig) -> Result<Box<dyn RankerClient>> {
    match cfg.kind {
        RankerKind::Identity => Ok(Box::new(IdentityRanker)),
        RankerKind::Lexical => Ok(Box::new(LexicalRanker)),
        RankerKind::Http => {
            let endpoint = cfg.endpoint.clone().ok_or_else(|| {
                Error::Config("ranker: http kind needs an endpoint".into())
            })?;
            Ok(Box::new(HttpRanker::new(endpoint)))
        }
    }
}

fn build_index(store: &Store, config: &ExperimentConfig) -> Result<Box<dyn SearchIndex>> {
    match config.retriever {
        RetrieverKind::Bm25 => Ok(Box::new(build_bm25_index(store, config.bm25)?)),
        RetrieverKind::Dense => {
            let embedder_cfg = config.providers.embedder.as_ref().ok_or_else(|| {
                Error::Config("dense retriever needs providers.embedder".into())
            })?;
            let embedder = build_embedder(embedder_cfg, config.embedding.dim)?;
            Ok(Box::new(build_dense_index(
                store,
                embedder,
                config.embedding.batch_size,
            )?))
        }
    }
}

fn load_templates(config: &ExperimentConfig) -> Result<TemplateSet> {
    let mut templates = TemplateSet::builtin();
    if let Some(dir) = &config.templates_dir {
        templates.load_overrides(dir)?;
    }
    Ok(templates)
}

// ---------------------------------------------------------------------------
// JSONL helpers
// ---------------------------------------------------------------------------

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)
        .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| Error::Schema(format!("write {}: {e}", path.display())))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AttackSummary {
    pub total: usize,
    pub crafted: usize,
    /// Queries whose poison file from an earlier run was kept.
    pub reused: usize,
    pub failed: Vec<(String, String)>,
}

enum CraftResult {
    Crafted,
    Reused,
    Failed(String),
}

/// Crafts poison sets for every query and persists one JSONL file per query
/// under `out_dir/poison`. With paraphrase mode on, also augments the query
/// set with paraphrases and writes `queries_augmented.jsonl`.
pub fn cmd_attack(config: &ExperimentConfig) -> Result<AttackSummary> {
    config.validate_for_attack()?;
    let hash = config.config_hash();
    fs::create_dir_all(&config.out_dir)?;
    let poison_dir = config.out_dir.join("poison");

    let (mut manifest, resume) = match RunManifest::load(&config.out_dir)? {
        Some(m) if m.config_hash == hash => (m, true),
        _ => (RunManifest::new(&hash), false),
    };

    let store = ingest_corpus(&config.corpus)?;
    let queries = load_queries(&config.queries)?;
    let index = build_index(&store, config)?;
    let templates = load_templates(config)?;
    let attacker_cfg = config.providers.attacker.as_ref().expect("validated");
    let provider = build_chat_provider("attacker", attacker_cfg)?;
    let analysis_cfg = role_generation_cfg(GenerationConfig::analysis(), attacker_cfg);
    let generation_cfg = role_generation_cfg(GenerationConfig::generation(), attacker_cfg);

    let strategy: Box<dyn AttackStrategy> = match config.attack {
        AttackKind::Paradox => Box::new(ParadoxAttack),
        AttackKind::Prepend => Box::new(PrependAttack),
        AttackKind::None => unreachable!("rejected by validation"),
    };

    let results: Vec<CraftResult> = parallel_map(&queries, config.workers, |_, q| {
        if resume {
            let path = poison_dir.join(poison_file_name(&q.id));
            if path.is_file() {
                if let Ok(set) = load_poison_set(&path) {
                    if set.query_id == q.id && set.n_per_query == config.n_per_query {
                        return CraftResult::Reused;
                    }
                }
            }
        }
        let craft = || -> Result<()> {
            // The attacker probes the clean index with the original
            // question; paraphrases exist to be unseen at attack time.
            let ranked = index.retrieve(&q.question, config.k)?;
            let retrieval: Vec<(String, String)> = ranked
                .iter()
                .map(|s| Ok((s.doc_id.clone(), store.require(&s.doc_id)?.text.clone())))
                .collect::<Result<_>>()?;
            let wrong_answer = match &q.wrong_answer {
                Some(w) => w.clone(),
                None => generate_wrong_answer(q, provider.as_ref(), &templates, &generation_cfg)?,
            };
            let ctx = AttackContext {
                provider: provider.as_ref(),
                templates: &templates,
                analysis_cfg: analysis_cfg.clone(),
                generation_cfg: generation_cfg.clone(),
                n_per_query: config.n_per_query,
                retrieval: &retrieval,
                use_rationale: config.rpa,
            };
            let set = strategy.craft(&ctx, q, &wrong_answer)?;
            save_poison_set(&poison_dir, &set)?;
            Ok(())
        };
        match craft() {
            Ok(()) => CraftResult::Crafted,
            Err(e) => CraftResult::Failed(e.to_string()),
        }
    });

    let mut summary = AttackSummary {
        total: queries.len(),
        crafted: 0,
        reused: 0,
        failed: Vec::new(),
    };
    for (q, result) in queries.iter().zip(&results) {
        match result {
            CraftResult::Crafted => summary.crafted += 1,
            CraftResult::Reused => summary.reused += 1,
            CraftResult::Failed(msg) => summary.failed.push((q.id.clone(), msg.clone())),
        }
    }

    if config.paraphrase_mode {
        let augmented_path = config.out_dir.join("queries_augmented.jsonl");
        let skip = resume
            && manifest.stage_completed("paraphrase")
            && augmented_path.is_file();
        if !skip {
            let augmented: Vec<(QueryCase, Option<String>)> =
                parallel_map(&queries, config.workers, |_, q| {
                    if q.paraphrase.is_some() {
                        return (q.clone(), None);
                    }
                    match paraphrase_query(q, provider.as_ref(), &templates, &generation_cfg) {
                        Ok(p) => {
                            let mut q = q.clone();
                            q.paraphrase = Some(p);
                            (q, None)
                        }
                        // Keep the original question; the run will fall back.
                        Err(e) => (q.clone(), Some(e.to_string())),
                    }
                });
            for (q, err) in &augmented {
                if let Some(msg) = err {
                    manifest
                        .warnings
                        .push(format!("paraphrase {}: {msg}", q.id));
                }
            }
            let cases: Vec<QueryCase> = augmented.into_iter().map(|(q, _)| q).collect();
            write_jsonl(&augmented_path, &cases)?;
            manifest.record_stage("paraphrase", "queries_augmented.jsonl", true);
        }
    }

    for (id, msg) in &summary.failed {
        manifest.warnings.push(format!("attack {id}: {msg}"));
    }
    manifest.record_stage("attack", "poison", summary.failed.is_empty());
    manifest.finish();
    manifest.save(&config.out_dir)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunSummary {
    pub conditions: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub report_path: PathBuf,
    /// A rerun found the finished report for this config and did nothing.
    pub already_complete: bool,
}

struct QueryRun {
    retrieval: RetrievalResult,
    answer: RagAnswer,
    outcome: QueryOutcome,
}

/// Derives the per-query judging seed: the run seed XORed with the leading
/// eight bytes of SHA-256 of the query id. Stable under query reordering and
/// resumes.
fn nes_seed(run_seed: u64, query_id: &str) -> u64 {
    let digest = Sha256::digest(query_id.as_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    run_seed ^ u64::from_le_bytes(first)
}

struct ConditionOutput {
    outcomes: Vec<QueryOutcome>,
    rows: Vec<PerQueryRow>,
    failed: Vec<(String, String)>,
}

#[allow(clippy::too_many_arguments)]
fn run_condition(
    name: &str,
    store: &Store,
    queries: &[QueryCase],
    poison_sets: Option<&BTreeMap<String, PoisonSet>>,
    config: &ExperimentConfig,
    templates: &TemplateSet,
    generator: &dyn ChatProvider,
    answering_cfg: &GenerationConfig,
    judge: Option<(&dyn ChatProvider, &GenerationConfig, usize)>,
    ranker: Option<&dyn RankerClient>,
) -> Result<ConditionOutput> {
    let index = build_index(store, config)?;

    type PerQuery = (Option<Box<QueryRun>>, Option<(String, String)>);
    let results: Vec<PerQuery> = parallel_map(queries, config.workers, |_, q| {
        let mut failure: Option<(String, String)> = None;
        let run = || -> Result<QueryRun> {
            let surface = q.surface_question(config.paraphrase_mode);
            let raw = index.retrieve(surface, config.k)?;
            let retrieval = RetrievalResult {
                query_id: q.id.clone(),
                ranked: raw,
            };
            let (answer, context) = answer_query(
                q,
                index.as_ref(),
                store,
                generator,
                templates,
                config.k,
                &config.defense,
                ranker,
                answering_cfg,
                config.paraphrase_mode,
            )?;
            let correct = extract_answer(&answer.response_text, q);
            let flags: Vec<bool> = context
                .iter()
                .map(|s| Ok(store.require(&s.doc_id)?.poisoned))
                .collect::<Result<_>>()?;
            let n_poison = poison_sets
                .and_then(|sets| sets.get(&q.id))
                .map(|set| set.docs.len())
                .unwrap_or(0);
            let outcome = QueryOutcome::new(
                RetrievalResult {
                    query_id: q.id.clone(),
                    ranked: context,
                },
                flags,
                n_poison,
                correct,
            )?;
            Ok(QueryRun {
                retrieval,
                answer,
                outcome,
            })
        };
        let mut run_result = match run() {
            Ok(r) => Some(Box::new(r)),
            Err(e) => {
                failure = Some((q.id.clone(), e.to_string()));
                None
            }
        };
        // Naturalness is judged on one sampled poison doc per query, only
        // where poison exists and a judge is configured.
        if let (Some(run), Some((judge, judge_cfg, judge_retries))) =
            (run_result.as_mut(), judge)
        {
            if let Some(set) = poison_sets.and_then(|sets| sets.get(&q.id)) {
                if !set.docs.is_empty() {
                    let mut rng = ChaCha8Rng::seed_from_u64(nes_seed(config.seed, &q.id));
                    let pick = rng.gen_range(0..set.docs.len());
                    let doc = &set.docs[pick];
                    match judge_nes(
                        &q.question,
                        &doc.text,
                        judge,
                        templates,
                        judge_cfg,
                        judge_retries,
                    ) {
                        Ok(score) => {
                            run.outcome.nes_sample = Some(NesSample {
                                doc_id: doc.doc_id.clone(),
                                score,
                            });
                        }
                        Err(e) => {
                            failure = Some((q.id.clone(), format!("nes: {e}")));
                        }
                    }
                }
            }
        }
        (run_result, failure)
    });

    let mut output = ConditionOutput {
        outcomes: Vec::new(),
        rows: Vec::new(),
        failed: Vec::new(),
    };
    let mut retrievals = Vec::new();
    let mut answers = Vec::new();
    for (run, failure) in results {
        if let Some(run) = run {
            let run = *run;
            output.rows.push(PerQueryRow {
                query_id: run.outcome.query_id.clone(),
                n_poisoned_retrieved: run.outcome.n_poisoned_retrieved,
                answered_correctly: run.outcome.answered_correctly,
                ndcg: ndcg_at_k(&run.outcome, config.k),
                nes: run.outcome.nes_sample.as_ref().map(|s| s.score),
                closed_book: run.answer.closed_book,
                defense_fallback: run.answer.defense_note.is_some(),
            });
            retrievals.push(run.retrieval);
            answers.push(run.answer);
            output.outcomes.push(run.outcome);
        }
        if let Some(f) = failure {
            output.failed.push(f);
        }
    }

    write_jsonl(&config.out_dir.join(format!("retrieval_{name}.jsonl")), &retrievals)?;
    write_jsonl(&config.out_dir.join(format!("answers_{name}.jsonl")), &answers)?;
    write_jsonl(&config.out_dir.join(format!("outcomes_{name}.jsonl")), &output.outcomes)?;
    Ok(output)
}

/// Rebuilds a finished condition's outputs from its artifacts.
fn reload_condition(name: &str, config: &ExperimentConfig) -> Result<ConditionOutput> {
    let outcomes: Vec<QueryOutcome> =
        read_jsonl(&config.out_dir.join(format!("outcomes_{name}.jsonl")))?;
    let answers: Vec<RagAnswer> =
        read_jsonl(&config.out_dir.join(format!("answers_{name}.jsonl")))?;
    let by_id: BTreeMap<&str, &RagAnswer> =
        answers.iter().map(|a| (a.query_id.as_str(), a)).collect();
    let rows = outcomes
        .iter()
        .map(|o| {
            let answer = by_id.get(o.query_id.as_str()).ok_or_else(|| {
                Error::Conflict(format!(
                    "condition {name}: outcome for {} has no matching answer record",
                    o.query_id
                ))
            })?;
            Ok(PerQueryRow {
                query_id: o.query_id.clone(),
                n_poisoned_retrieved: o.n_poisoned_retrieved,
                answered_correctly: o.answered_correctly,
                ndcg: ndcg_at_k(o, config.k),
                nes: o.nes_sample.as_ref().map(|s| s.score),
                closed_book: answer.closed_book,
                defense_fallback: answer.defense_note.is_some(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionOutput {
        outcomes,
        rows,
        failed: Vec::new(),
    })
}

/// Evaluates the configured conditions end to end and writes the report.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate_for_run()?;
    let hash = config.config_hash();
    fs::create_dir_all(&config.out_dir)?;
    let report_path = config.out_dir.join("report.json");

    let (mut manifest, resume) = match RunManifest::load(&config.out_dir)? {
        Some(m) if m.config_hash == hash => {
            if m.stage_completed("report") && report_path.is_file() {
                return Ok(RunSummary {
                    conditions: Vec::new(),
                    failed: Vec::new(),
                    report_path,
                    already_complete: true,
                });
            }
            (m, true)
        }
        _ => (RunManifest::new(&hash), false),
    };

    // Paraphrase-mode runs prefer the augmented query set the attack stage
    // wrote; without one, queries keep whatever paraphrases they shipped
    // with.
    let augmented_path = config.out_dir.join("queries_augmented.jsonl");
    let queries = if config.paraphrase_mode && augmented_path.is_file() {
        load_queries(&augmented_path)?
    } else {
        load_queries(&config.queries)?
    };

    let poison_sets = if config.attack != AttackKind::None {
        let sets = load_poison_sets(&config.out_dir.join("poison"))?;
        if sets.is_empty() {
            return Err(Error::NotFound(format!(
                "no poison sets under {} (run the attack command first)",
                config.out_dir.join("poison").display()
            )));
        }
        Some(sets)
    } else {
        None
    };

    // Condition plan: the clean corpus, then the poisoned one.
    let mut plan: Vec<(String, Store, Option<&BTreeMap<String, PoisonSet>>)> = Vec::new();
    if config.attack == AttackKind::None || config.clean_baseline {
        plan.push(("clean".to_string(), ingest_corpus(&config.corpus)?, None));
    }
    if let Some(sets) = &poison_sets {
        let mut attacked = ingest_corpus(&config.corpus)?;
        let docs: Vec<_> = sets.values().flat_map(|s| s.docs.iter().cloned()).collect();
        attacked.inject_poison(docs)?;
        plan.push((config.attack.as_str().to_string(), attacked, Some(sets)));
    }

    let templates = load_templates(config)?;
    let generator_cfg = config.providers.generator.as_ref().expect("validated");
    let generator = build_chat_provider("generator", generator_cfg)?;
    let answering_cfg = role_generation_cfg(GenerationConfig::answering(), generator_cfg);
    let judge_provider = match &config.providers.judge {
        Some(cfg) => Some((
            build_chat_provider("judge", cfg)?,
            role_generation_cfg(GenerationConfig::answering(), cfg),
            cfg.max_retries,
        )),
        None => None,
    };
    let ranker = match &config.providers.ranker {
        Some(cfg) => Some(build_ranker(cfg)?),
        None => None,
    };

    let mut summary = RunSummary {
        conditions: Vec::new(),
        failed: Vec::new(),
        report_path: report_path.clone(),
        already_complete: false,
    };
    let mut condition_outcomes: Vec<(String, Vec<QueryOutcome>)> = Vec::new();
    let mut per_query: BTreeMap<String, Vec<PerQueryRow>> = BTreeMap::new();

    for (name, store, sets) in &plan {
        let stage = format!("condition:{name}");
        let artifacts_exist = config.out_dir.join(format!("outcomes_{name}.jsonl")).is_file()
            && config.out_dir.join(format!("answers_{name}.jsonl")).is_file();
        let output = if resume && manifest.stage_completed(&stage) && artifacts_exist {
            reload_condition(name, config)?
        } else {
            // NES is judged under attacked conditions only; clean-corpus
            // outcomes have no poison docs to score.
            let judge = match (&judge_provider, sets) {
                (Some((p, cfg, retries)), Some(_)) => Some((p.as_ref(), cfg, *retries)),
                _ => None,
            };
            let output = run_condition(
                name,
                store,
                &queries,
                *sets,
                config,
                &templates,
                generator.as_ref(),
                &answering_cfg,
                judge,
                ranker.as_deref(),
            )?;
            manifest.record_stage(
                &stage,
                &format!("outcomes_{name}.jsonl"),
                output.failed.is_empty(),
            );
            output
        };
        summary.conditions.push(name.clone());
        for (id, msg) in &output.failed {
            summary.failed.push((id.clone(), format!("{name}: {msg}")));
        }
        per_query.insert(name.clone(), output.rows);
        condition_outcomes.push((name.clone(), output.outcomes));
    }

    let report = build_report(tool_tag(), &hash, config.k, condition_outcomes, per_query);
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Schema(format!("report: {e}")))?;
    fs::write(&report_path, body + "\n")?;
    fs::write(config.out_dir.join("report.txt"), render_text(&report))?;

    for (id, msg) in &summary.failed {
        manifest.warnings.push(format!("run {id}: {msg}"));
    }
    manifest.record_stage("report", "report.json", summary.failed.is_empty());
    manifest.finish();
    manifest.save(&config.out_dir)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

/// Paired comparison of two runs over their focus conditions.
#[derive(Debug, Serialize)]
pub struct StatsComparison {
    pub report_a: String,
    pub report_b: String,
    pub condition_a: String,
    pub condition_b: String,
    pub n: usize,
    /// Differences (a - b) in poison docs retrieved per query.
    pub selection: PairedStats,
    /// Differences (a - b) in per-query correctness (1 right, 0 wrong).
    pub correctness: PairedStats,
}

fn load_report(path: &Path) -> Result<Report> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::parse(path, 0, format!("bad report: {e}")))
}

/// The condition a report is "about": its last one (the attacked condition
/// when present, otherwise the clean baseline).
fn focus_condition(report: &Report) -> Result<(&str, &[PerQueryRow])> {
    let last = report
        .conditions
        .last()
        .ok_or_else(|| Error::InvalidInput("report has no conditions".into()))?;
    let rows = report
        .per_query
        .get(&last.name)
        .ok_or_else(|| {
            Error::InvalidInput(format!("report has no per-query rows for {}", last.name))
        })?;
    Ok((&last.name, rows))
}

/// Pairs two reports query by query and runs paired t-tests on selection and
/// correctness. The query id sets must match exactly.
pub fn cmd_stats(path_a: &Path, path_b: &Path) -> Result<StatsComparison> {
    let a = load_report(path_a)?;
    let b = load_report(path_b)?;
    let (name_a, rows_a) = focus_condition(&a)?;
    let (name_b, rows_b) = focus_condition(&b)?;

    let by_id_b: BTreeMap<&str, &PerQueryRow> =
        rows_b.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let ids_a: std::collections::BTreeSet<&str> =
        rows_a.iter().map(|r| r.query_id.as_str()).collect();
    let missing_in_b: Vec<&str> = rows_a
        .iter()
        .map(|r| r.query_id.as_str())
        .filter(|id| !by_id_b.contains_key(id))
        .collect();
    let missing_in_a: Vec<&str> = by_id_b
        .keys()
        .filter(|id| !ids_a.contains(**id))
        .copied()
        .collect();
    if !missing_in_a.is_empty() || !missing_in_b.is_empty() {
        return Err(Error::Config(format!(
            "reports cover different queries; missing in {}: [{}]; missing in {}: [{}]",
            path_a.display(),
            missing_in_a.join(", "),
            path_b.display(),
            missing_in_b.join(", "),
        )));
    }

    let mut selection_diffs = Vec::with_capacity(rows_a.len());
    let mut correctness_diffs = Vec::with_capacity(rows_a.len());
    for row_a in rows_a {
        let row_b = by_id_b[row_a.query_id.as_str()];
        selection_diffs
            .push(row_a.n_poisoned_retrieved as f64 - row_b.n_poisoned_retrieved as f64);
        correctness_diffs.push(
            (row_a.answered_correctly as u8 as f64) - (row_b.answered_correctly as u8 as f64),
        );
    }
    Ok(StatsComparison {
        report_a: path_a.display().to_string(),
        report_b: path_b.display().to_string(),
        condition_a: name_a.to_string(),
        condition_b: name_b.to_string(),
        n: rows_a.len(),
        selection: ttest_from_diffs(&selection_diffs)?,
        correctness: ttest_from_diffs(&correctness_diffs)?,
    })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Renders one or more report files as text; optionally writes a merged CSV
/// with a leading config column.
pub fn cmd_report(paths: &[PathBuf], csv_out: Option<&Path>) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("no report files given".into()));
    }
    let mut text = String::new();
    let mut csv = String::from(
        "config,condition,n_queries,accuracy,asr,selection_rate,ndcg,ndcg_excluded,nes_mean,nes_count\n",
    );
    for path in paths {
        let report = load_report(path)?;
        text.push_str(&format!("== {}\n", path.display()));
        text.push_str(&render_text(&report));
        text.push('\n');
        let short = &report.config_hash[..report.config_hash.len().min(12)];
        for line in render_csv(&report).lines().skip(1) {
            csv.push_str(&format!("{short},{line}\n"));
        }
    }
    if let Some(csv_path) = csv_out {
        fs::write(csv_path, &csv)?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order_and_covers_all_items() {
        let items: Vec<usize> = (0..100).collect();
        for workers in [1, 2, 7] {
            let out = parallel_map(&items, workers, |i, v| {
                assert_eq!(i, *v);
                v * 3
            });
            assert_eq!(out, (0..100).map(|v| v * 3).collect::<Vec<_>>(), "workers {workers}");
        }
    }

    #[test]
    fn parallel_map_handles_empty_and_single() {
        let empty: Vec<u8> = Vec::new();
        assert!(parallel_map(&empty, 4, |_, v| *v).is_empty());
        assert_eq!(parallel_map(&[9], 4, |_, v| *v), vec![9]);
    }

    #[test]
    fn nes_seed_is_stable_and_query_dependent() {
        let a1 = nes_seed(42, "q1");
        let a2 = nes_seed(42, "q1");
        let b = nes_seed(42, "q2");
        let c = nes_seed(43, "q1");
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![
            PerQueryRow {
                query_id: "q1".into(),
                n_poisoned_retrieved: 3,
                answered_correctly: false,
                ndcg: Some(0.5),
                nes: Some(4),
                closed_book: false,
                defense_fallback: false,
            },
            PerQueryRow {
                query_id: "q2".into(),
                n_poisoned_retrieved: 0,
                answered_correctly: true,
                ndcg: None,
                nes: None,
                closed_book: true,
                defense_fallback: true,
            },
        ];
        write_jsonl(&path, &rows).unwrap();
        let back: Vec<PerQueryRow> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].query_id, "q1");
        assert_eq!(back[1].ndcg, None);
        assert!(back[1].closed_book);
    }

    #[test]
    fn read_jsonl_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"query_id\":\"q\",\"n_poisoned_retrieved\":0,\"answered_correctly\":true,\"closed_book\":false,\"defense_fallback\":false}\nnot json\n").unwrap();
        let err = read_jsonl::<PerQueryRow>(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn focus_condition_picks_the_last() {
        let report = build_report(
            "t",
            "h",
            5,
            vec![("clean".into(), Vec::new()), ("paradox".into(), Vec::new())],
            BTreeMap::from([
                ("clean".to_string(), Vec::new()),
                ("paradox".to_string(), Vec::new()),
            ]),
        );
        let (name, _) = focus_condition(&report).unwrap();
        assert_eq!(name, "paradox");
    }
}
