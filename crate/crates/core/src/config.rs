//! Run configuration: one TOML document, defaults applied, every violation
//! reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{DEFAULT_MAX_CLAIM_CHARS, DEFAULT_MAX_FAILURE_RATE};
use crate::clock::RetryPolicy;
use crate::cluster::ClusterConfig;
use crate::error::{Error, Result, Violation};
use crate::eval::DEFAULT_K;
use crate::keywords::{DEFAULT_HEAVY_N, DEFAULT_KEYWORD_ROUNDS, DEFAULT_LESSER_N, DEFAULT_QUERY_COUNT};
use crate::model::{SplitProportions, Topic};
use crate::source::SourceConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopicSpec {
    Title(String),
    Full {
        title: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        description: Option<String>,
    },
}

impl TopicSpec {
    pub fn to_topic(&self) -> Result<Topic> {
        match self {
            TopicSpec::Title(t) => Topic::from_title(t),
            TopicSpec::Full { title, description } => {
                let mut topic = Topic::from_title(title)?;
                topic.description = description.clone().filter(|d| !d.trim().is_empty());
                Ok(topic)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeywordsConfig {
    pub heavy_n: usize,
    pub lesser_n: usize,
    /// Prompt rounds used to reach the requested sizes.
    pub rounds: u32,
}

impl Default for KeywordsConfig {
    fn default() -> Self {
        Self {
            heavy_n: DEFAULT_HEAVY_N,
            lesser_n: DEFAULT_LESSER_N,
            rounds: DEFAULT_KEYWORD_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueriesConfig {
    pub count: usize,
}

impl Default for QueriesConfig {
    fn default() -> Self {
        Self { count: DEFAULT_QUERY_COUNT }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmKind {
    /// Replays fixture files.
    #[default]
    Mock,
    /// Deterministic text heuristics, no fixtures needed.
    RuleBased,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub kind: LlmKind,
    pub mock_dir: PathBuf,
    /// When set, every completion is also written here as a replayable fixture.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_dir: Option<PathBuf>,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            kind: LlmKind::Mock,
            mock_dir: PathBuf::from("fixtures"),
            record_dir: None,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "SYNTHSET_LLM_API_KEY".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// Seeded bag-of-words vectors, offline.
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub seed: u64,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub batch_size: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hash,
            dim: 256,
            seed: 0,
            endpoint: "http://localhost:8080/embed".into(),
            model: "sentence-t5-large".into(),
            api_key_env: "SYNTHSET_EMBED_API_KEY".into(),
            batch_size: 64,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// JSONL files under `endpoint`.
    #[default]
    Local,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceSection {
    pub kind: SourceKind,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    #[serde(flatten)]
    pub settings: SourceConfig,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            kind: SourceKind::Local,
            api_key_env: None,
            timeout_secs: 30,
            settings: SourceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateConfig {
    /// Candidate topic labels; empty means free-form labels.
    pub topic_candidates: Vec<String>,
    pub allow_free_form: bool,
    pub max_claim_chars: usize,
    pub max_failure_rate: f64,
    pub max_in_flight: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            topic_candidates: Vec::new(),
            allow_free_form: false,
            max_claim_chars: DEFAULT_MAX_CLAIM_CHARS,
            max_failure_rate: DEFAULT_MAX_FAILURE_RATE,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Fixed when both the source and the LLM are offline, system otherwise.
    #[default]
    Auto,
    System,
    /// Starts at the Unix epoch and only moves on sleeps. Runs are reproducible
    /// byte for byte.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    pub topics: Vec<TopicSpec>,
    pub seed: u64,
    pub out: PathBuf,
    /// Stage checkpoints; kept apart from `out` so emitting never clobbers them.
    pub cache_dir: PathBuf,
    pub clock: ClockMode,
    pub keywords: KeywordsConfig,
    pub queries: QueriesConfig,
    pub source: SourceSection,
    pub llm: LlmConfig,
    pub embedding: EmbeddingConfig,
    pub annotate: AnnotateConfig,
    pub cluster: ClusterConfig,
    pub splits: SplitProportions,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            topic: None,
            topics: Vec::new(),
            seed: 0,
            out: PathBuf::from("dataset"),
            cache_dir: PathBuf::from(".synthset-cache"),
            clock: ClockMode::Auto,
            keywords: KeywordsConfig::default(),
            queries: QueriesConfig::default(),
            source: SourceSection::default(),
            llm: LlmConfig::default(),
            embedding: EmbeddingConfig::default(),
            annotate: AnnotateConfig::default(),
            cluster: ClusterConfig::default(),
            splits: SplitProportions::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(v: &mut Vec<Violation>, key: &str, value: usize) {
    if value == 0 {
        v.push(Violation::new(key, "must be at least 1"));
    }
}

fn key_paths(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(path.clone());
            key_paths(v, &path, out);
        }
    }
}

fn lookup<'a>(value: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(value, |v, k| v.get(k))
}

impl Config {
    /// Folds `topic` into `topics` and drops duplicate titles.
    pub fn normalize(mut self) -> Self {
        if let Some(t) = self.topic.take() {
            self.topics.insert(0, TopicSpec::Title(t));
        }
        let mut seen = std::collections::BTreeSet::new();
        self.topics.retain(|t| match t.to_topic() {
            Ok(topic) => seen.insert(topic.topic_id),
            Err(_) => true,
        });
        self
    }

    /// Topics in order, `topic` first, duplicates by id removed.
    pub fn resolved_topics(&self) -> Result<Vec<Topic>> {
        let specs = self.topic.iter().map(|t| ("topic".to_string(), TopicSpec::Title(t.clone())));
        let specs = specs.chain(self.topics.iter().enumerate().map(|(i, t)| (format!("topics[{i}]"), t.clone())));
        let mut out: Vec<Topic> = Vec::new();
        let mut bad = Vec::new();
        for (path, spec) in specs {
            match spec.to_topic() {
                Ok(topic) if out.iter().any(|t| t.topic_id == topic.topic_id) => {}
                Ok(topic) => out.push(topic),
                Err(e) => bad.extend(
                    e.violations()
                        .iter()
                        .map(|v| Violation::new(format!("{path}.{}", v.path), v.message.clone())),
                ),
            }
        }
        if bad.is_empty() {
            Ok(out)
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.topics.is_empty() && self.topic.is_none() {
            v.push(Violation::new("topics", "at least one topic is required"));
        }
        if let Err(e) = self.resolved_topics() {
            v.extend(e.violations().iter().cloned());
        }
        positive(&mut v, "keywords.heavy_n", self.keywords.heavy_n);
        if self.keywords.lesser_n < 2 {
            v.push(Violation::new("keywords.lesser_n", "at least 2 lesser terms are needed to form a pair"));
        }
        positive(&mut v, "keywords.rounds", self.keywords.rounds as usize);
        positive(&mut v, "queries.count", self.queries.count);
        v.extend(self.source.settings.violations());
        positive(&mut v, "llm.max_tokens", self.llm.max_tokens as usize);
        if !(0.0..=2.0).contains(&self.llm.temperature) {
            v.push(Violation::new("llm.temperature", "out of [0,2]"));
        }
        positive(&mut v, "llm.retry.max_attempts", self.llm.retry.max_attempts as usize);
        positive(&mut v, "embedding.dim", self.embedding.dim);
        positive(&mut v, "embedding.batch_size", self.embedding.batch_size);
        positive(&mut v, "annotate.max_claim_chars", self.annotate.max_claim_chars);
        positive(&mut v, "annotate.max_in_flight", self.annotate.max_in_flight);
        if !(0.0..=1.0).contains(&self.annotate.max_failure_rate) {
            v.push(Violation::new("annotate.max_failure_rate", "out of [0,1]"));
        }
        v.extend(
            self.cluster
                .violations()
                .into_iter()
                .map(|x| Violation::new("cluster.tau", x.message)),
        );
        v.extend(self.splits.violations());
        positive(&mut v, "eval.k", self.eval.k);
        if self.cache_dir == self.out {
            v.push(Violation::new("cache_dir", "must differ from out"));
        }
        v
    }

    /// Rebases relative paths onto `base`, normally the config file's directory.
    pub fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        fix(&mut self.cache_dir);
        fix(&mut self.llm.mock_dir);
        if let Some(d) = self.llm.record_dir.as_mut() {
            fix(d);
        }
        if self.source.kind == SourceKind::Local {
            let mut corpus = PathBuf::from(&self.source.settings.endpoint);
            fix(&mut corpus);
            self.source.settings.endpoint = corpus.to_string_lossy().into_owned();
        }
        self
    }

    pub fn fixed_clock(&self) -> bool {
        match self.clock {
            ClockMode::Fixed => true,
            ClockMode::System => false,
            ClockMode::Auto => self.source.kind == SourceKind::Local && self.llm.kind != LlmKind::Http,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses a config document and applies defaults. Only syntax, type and
/// unknown-key problems are reported here.
pub fn parse_config_str(body: &str) -> std::result::Result<Config, Vec<Violation>> {
    match parse_with_unknown(body)? {
        (config, unknown) if unknown.is_empty() => Ok(config),
        (_, unknown) => Err(unknown),
    }
}

fn parse_with_unknown(body: &str) -> std::result::Result<(Config, Vec<Violation>), Vec<Violation>> {
    let raw: toml::Value = body
        .parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| vec![Violation::new("config", e.message().to_string())])?;
    let config: Config = raw
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| vec![Violation::new("config", e.message().to_string())])?;
    let echoed = toml::Value::try_from(&config).expect("config serializes");
    let mut paths = Vec::new();
    key_paths(&raw, "", &mut paths);
    let unknown: Vec<Violation> = paths
        .into_iter()
        .filter(|p| !p.starts_with("topics.") && lookup(&echoed, p).is_none())
        .map(|p| Violation::new(p, "unknown key"))
        .collect();
    Ok((config, unknown))
}

/// Parses a config document, applies defaults and returns the normalized
/// config or every violation found.
pub fn validate_config_str(body: &str) -> std::result::Result<Config, Vec<Violation>> {
    let (config, mut violations) = parse_with_unknown(body)?;
    violations.extend(config.violations());
    if violations.is_empty() {
        Ok(config.normalize())
    } else {
        Err(violations)
    }
}

/// Reads a config file and applies defaults. Relative paths inside it are
/// taken relative to the file.
pub fn load_config(path: &Path) -> std::result::Result<Config, Vec<Violation>> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| vec![Violation::new(path.display().to_string(), format!("unreadable: {e}"))])?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&body).map(|c| c.rebase(base))
}

/// [`load_config`] followed by every semantic check.
pub fn validate_config(path: &Path) -> std::result::Result<Config, Vec<Violation>> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| vec![Violation::new(path.display().to_string(), format!("unreadable: {e}"))])?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_config_str(&body).map(|c| c.rebase(base))
}
