//! Experiment configuration: the TOML schema, CLI override merging, config
//! hashing, and the run manifest.
//!
//! The config hash pins a run to the exact resolved settings. Reports embed
//! the hash and stay free of wall-clock state; the manifest carries the
//! timestamps and stage ledger instead, so resumed runs can tell whether an
//! artifact on disk belongs to the config in hand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rag::{DefenseConfig, DefenseKind};
use crate::retrieval::Bm25Params;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `name version`, used as the `tool` field of reports and manifests.
pub fn tool_tag() -> String {
    format!("paradox {TOOL_VERSION}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Bm25,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Paradox,
    Prepend,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Paradox => "paradox",
            AttackKind::Prepend => "prepend",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Scripted,
    Http,
}

/// One chat-model backend. Scripted providers replay fixture files; http
/// providers speak the chat-completions wire format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Fixture JSONL for scripted providers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Environment variable holding the bearer token; never the token itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Overrides the role's default sampling temperature when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_max_retries() -> usize {
    5
}

impl ProviderConfig {
    fn validate(&self, role: &str) -> Result<()> {
        match self.kind {
            ProviderKind::Scripted => {
                let Some(path) = &self.fixtures else {
                    return Err(Error::Config(format!(
                        "{role}: scripted provider needs a fixtures path"
                    )));
                };
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "{role}: fixtures file {} not found",
                        path.display()
                    )));
                }
            }
            ProviderKind::Http => {
                if self.endpoint.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::Config(format!(
                        "{role}: http provider needs an endpoint"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Deterministic feature-hashing embedder; no network.
    #[default]
    Hashed,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankerKind {
    #[default]
    Identity,
    Lexical,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankerConfig {
    pub kind: RankerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

/// Model backends by role. Only the roles a given command exercises need to
/// be present; validation is per command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Providers {
    /// Runs decomposition, rationale, wrong answers, and poison generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker: Option<ProviderConfig>,
    /// Answers queries in the RAG pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ProviderConfig>,
    /// Scores poison-document naturalness; omit to skip NES.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranker: Option<RankerConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_batch_size() -> usize {
    32
}

fn default_dim() -> usize {
    256
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            batch_size: default_batch_size(),
            dim: default_dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub retriever: RetrieverKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub attack: AttackKind,
    /// Poison documents crafted per query.
    #[serde(default = "default_n_per_query")]
    pub n_per_query: usize,
    /// Master seed; all run-level randomness derives from it.
    pub seed: u64,
    /// Evaluate against paraphrased questions the attack never saw.
    #[serde(default)]
    pub paraphrase_mode: bool,
    /// Run the per-document retrieval-rationale analysis during the attack.
    #[serde(default = "default_true")]
    pub rpa: bool,
    /// Also evaluate the unpoisoned corpus as a "clean" condition.
    #[serde(default = "default_true")]
    pub clean_baseline: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Directory of template overrides; bundled templates fill the gaps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub providers: Providers,
}

fn default_k() -> usize {
    5
}

fn default_n_per_query() -> usize {
    5
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

/// CLI-level overrides applied on top of the TOML before hashing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub attack: Option<AttackKind>,
    pub retriever: Option<RetrieverKind>,
    pub k: Option<usize>,
    pub defense: Option<DefenseKind>,
    pub paraphrase: Option<bool>,
}

impl ExperimentConfig {
    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(v) = &ov.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.attack {
            self.attack = v;
        }
        if let Some(v) = ov.retriever {
            self.retriever = v;
        }
        if let Some(v) = ov.k {
            self.k = v;
        }
        if let Some(v) = ov.defense {
            self.defense.kind = v;
        }
        if let Some(v) = ov.paraphrase {
            self.paraphrase_mode = v;
        }
    }

    /// Structural checks shared by every command.
    pub fn validate_common(&self) -> Result<()> {
        if !self.corpus.is_file() {
            return Err(Error::Config(format!(
                "corpus file {} not found",
                self.corpus.display()
            )));
        }
        if !self.queries.is_file() {
            return Err(Error::Config(format!(
                "queries file {} not found",
                self.queries.display()
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.n_per_query == 0 {
            return Err(Error::Config("n_per_query must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.bm25.k1 > 0.0) {
            return Err(Error::Config("bm25.k1 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bm25.b) {
            return Err(Error::Config("bm25.b must lie in [0, 1]".into()));
        }
        if self.embedding.dim == 0 || self.embedding.batch_size == 0 {
            return Err(Error::Config(
                "embedding.dim and embedding.batch_size must be at least 1".into(),
            ));
        }
        self.defense.validate()?;
        if let Some(dir) = &self.templates_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "templates_dir {} is not a directory",
                    dir.display()
                )));
            }
        }
        if let Some(embedder) = &self.providers.embedder {
            if embedder.kind == EmbedderKind::Http
                && embedder.endpoint.as_deref().unwrap_or("").is_empty()
            {
                return Err(Error::Config("embedder: http kind needs an endpoint".into()));
            }
        }
        if let Some(ranker) = &self.providers.ranker {
            if ranker.kind == RankerKind::Http
                && ranker.endpoint.as_deref().unwrap_or("").is_empty()
            {
                return Err(Error::Config("ranker: http kind needs an endpoint".into()));
            }
        }
        Ok(())
    }

    /// Checks for the attack command: crafting poison needs an attacker
    /// model and an attack other than `none`.
    pub fn validate_for_attack(&self) -> Result<()> {
        self.validate_common()?;
        if self.attack == AttackKind::None {
            return Err(Error::Config(
                "attack command needs attack = \"paradox\" or \"prepend\"".into(),
            ));
        }
        let attacker = self
            .providers
            .attacker
            .as_ref()
            .ok_or_else(|| Error::Config("attack command needs providers.attacker".into()))?;
        attacker.validate("providers.attacker")?;
        if self.retriever == RetrieverKind::Dense && self.providers.embedder.is_none() {
            return Err(Error::Config(
                "dense retriever needs providers.embedder".into(),
            ));
        }
        Ok(())
    }

    /// Checks for the run command: answering needs a generator, dense needs
    /// an embedder, the rerank defense needs a ranker.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate_common()?;
        let generator = self
            .providers
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config("run command needs providers.generator".into()))?;
        generator.validate("providers.generator")?;
        if let Some(judge) = &self.providers.judge {
            judge.validate("providers.judge")?;
        }
        if self.retriever == RetrieverKind::Dense && self.providers.embedder.is_none() {
            return Err(Error::Config(
                "dense retriever needs providers.embedder".into(),
            ));
        }
        if self.defense.kind == DefenseKind::Rerank && self.providers.ranker.is_none() {
            return Err(Error::Config(
                "rerank defense needs providers.ranker".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of the resolved config.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses the TOML config at `path`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
    toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// One pipeline stage in the manifest: where its artifact lives and whether
/// it finished.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifact: String,
    pub completed: bool,
}

/// Persistent run state. This is the only artifact that carries wall-clock
/// data; reports must stay byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub started_epoch_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_epoch_s: Option<u64>,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn now_epoch_s() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: impl Into<String>) -> Self {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.into(),
            started_epoch_s: now_epoch_s(),
            finished_epoch_s: None,
            stages: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn record_stage(&mut self, name: &str, artifact: &str, completed: bool) {
        self.stages.insert(
            name.to_string(),
            StageRecord {
                artifact: artifact.to_string(),
                completed,
            },
        );
    }

    pub fn stage_completed(&self, name: &str) -> bool {
        self.stages.get(name).is_some_and(|s| s.completed)
    }

    pub fn finish(&mut self) {
        self.finished_epoch_s = Some(now_epoch_s());
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("manifest: {e}")))?;
        fs::write(&path, body)?;
        Ok(())
    }

    /// Loads the manifest from `out_dir` if one exists.
    pub fn load(out_dir: &Path) -> Result<Option<RunManifest>> {
        let path = out_dir.join("manifest.json");
        if !path.is_file() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path)?;
        let manifest = serde_json::from_str(&raw)
            .map_err(|e| Error::parse(&path, 0, format!("manifest: {e}")))?;
        Ok(Some(manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn minimal_toml(dir: &Path) -> String {
        let corpus = write_file(dir, "corpus.jsonl", "{\"id\":\"d1\",\"text\":\"hello\"}\n");
        let queries = write_file(
            dir,
            "queries.jsonl",
            "{\"id\":\"q1\",\"question\":\"hi\",\"answers\":[\"hello\"]}\n",
        );
        format!(
            "corpus = {corpus:?}\nqueries = {queries:?}\nout_dir = {:?}\nseed = 7\n",
            dir.join("out")
        )
    }

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let toml_body = minimal_toml(dir.path());
        let cfg: ExperimentConfig = toml::from_str(&toml_body).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.n_per_query, 5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.retriever, RetrieverKind::Bm25);
        assert_eq!(cfg.attack, AttackKind::None);
        assert!(cfg.rpa);
        assert!(cfg.clean_baseline);
        assert!(!cfg.paraphrase_mode);
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.bm25.k1, 2.0);
        assert_eq!(cfg.bm25.b, 0.75);
        assert_eq!(cfg.embedding.batch_size, 32);
        assert_eq!(cfg.embedding.dim, 256);
        assert_eq!(cfg.defense.kind, DefenseKind::None);
        cfg.validate_common().unwrap();
    }

    #[test]
    fn missing_seed_is_a_parse_error() {
        let err = toml::from_str::<ExperimentConfig>(
            "corpus = \"c\"\nqueries = \"q\"\nout_dir = \"o\"\n",
        );
        assert!(err.is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: ExperimentConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        let base = cfg.config_hash();
        assert_eq!(base.len(), 64);
        assert_eq!(base, cfg.config_hash(), "hashing is stable");

        let mut changed = cfg.clone();
        changed.k = 10;
        assert_ne!(base, changed.config_hash());

        let mut reseeded = cfg.clone();
        reseeded.seed = 8;
        assert_ne!(base, reseeded.config_hash());
    }

    #[test]
    fn overrides_apply_before_hashing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg: ExperimentConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        let ov = Overrides {
            seed: Some(99),
            attack: Some(AttackKind::Paradox),
            k: Some(3),
            defense: Some(DefenseKind::Confidence),
            paraphrase: Some(true),
            ..Overrides::default()
        };
        cfg.apply_overrides(&ov);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.attack, AttackKind::Paradox);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.defense.kind, DefenseKind::Confidence);
        assert!(cfg.paraphrase_mode);
    }

    #[test]
    fn command_validation_demands_role_providers() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg: ExperimentConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();

        let err = cfg.validate_for_run().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "no generator configured");

        cfg.attack = AttackKind::Paradox;
        let err = cfg.validate_for_attack().unwrap_err();
        assert!(err.to_string().contains("attacker"));

        let fixtures = write_file(dir.path(), "fx.jsonl", "");
        cfg.providers.attacker = Some(ProviderConfig {
            kind: ProviderKind::Scripted,
            fixtures: Some(fixtures.clone()),
            endpoint: None,
            model: None,
            api_key_env: None,
            backoff_ms: 250,
            max_retries: 5,
            max_tokens: None,
            temperature: None,
        });
        cfg.validate_for_attack().unwrap();

        cfg.providers.generator = Some(ProviderConfig {
            kind: ProviderKind::Scripted,
            fixtures: Some(fixtures),
            endpoint: None,
            model: None,
            api_key_env: None,
            backoff_ms: 250,
            max_retries: 5,
            max_tokens: None,
            temperature: None,
        });
        cfg.validate_for_run().unwrap();

        cfg.defense.kind = DefenseKind::Rerank;
        let err = cfg.validate_for_run().unwrap_err();
        assert!(err.to_string().contains("ranker"));

        cfg.providers.ranker = Some(RankerConfig {
            kind: RankerKind::Lexical,
            endpoint: None,
        });
        cfg.validate_for_run().unwrap();

        cfg.retriever = RetrieverKind::Dense;
        let err = cfg.validate_for_run().unwrap_err();
        assert!(err.to_string().contains("embedder"));
        cfg.providers.embedder = Some(EmbedderConfig {
            kind: EmbedderKind::Hashed,
            endpoint: None,
            model: None,
            api_key_env: None,
        });
        cfg.validate_for_run().unwrap();
    }

    #[test]
    fn attack_none_rejected_by_attack_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: ExperimentConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        let err = cfg.validate_for_attack().unwrap_err();
        assert!(err.to_string().contains("paradox"));
    }

    #[test]
    fn manifest_round_trip_and_stage_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::new("beef");
        manifest.record_stage("attack", "poison/", true);
        manifest.record_stage("run", "report.json", false);
        manifest.warnings.push("q3: generation failed".into());
        manifest.save(dir.path()).unwrap();

        let loaded = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(loaded.config_hash, "beef");
        assert!(loaded.stage_completed("attack"));
        assert!(!loaded.stage_completed("run"));
        assert!(!loaded.stage_completed("absent"));
        assert_eq!(loaded.warnings.len(), 1);

        assert!(RunManifest::load(&dir.path().join("empty")).unwrap().is_none());
    }
}
