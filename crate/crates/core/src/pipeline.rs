//! Staged execution with content-addressed checkpoints.
//!
//! Stages run in order: keywords, queries, fetch (each per topic), then
//! annotate, cluster, split and emit. Every stage output is stored under
//! `<cache_dir>/<stage>/<key>.json`, where the key digests the stage's
//! inputs and settings, so an unchanged rerun makes no provider calls.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotator, JobReport};
use crate::clock::{Clock, ManualClock, RateLimiter, SystemClock};
use crate::cluster::cluster_claims;
use crate::config::{Config, EmbeddingKind, LlmKind, SourceKind};
use crate::dataset::{emit, split, validate_dataset, SplitOutcome};
use crate::embed::{embed_all, CountingEmbedder, EmbedOptions, Embedder, EmbeddingCache, HashEmbedder, HttpEmbedder};
use crate::error::{Error, ProviderError, Result};
use crate::keywords::{generate_keywords, sample_queries, QueryPlan};
use crate::llm::{CountingLlm, HttpChatLlm, LlmClient, LlmProvider, MockLlm, PromptSet, RecordingLlm, RuleBasedLlm};
use crate::model::{
    ClaimTuple, ClusterAssignment, DatasetManifest, KeywordSet, Post, ProviderInfo, Query, RelationTuple, Topic,
    TopicTuple, GENERATED_POST_ID, SCHEMA_VERSION,
};
use crate::source::{dedup_posts, fetch_posts, FetchOutcome, HttpSearchSource, LocalCorpusSource, SearchPage, SearchSource};
use crate::text::{sha256_hex, FieldHasher};

pub const STAGES: [&str; 7] = ["keywords", "queries", "fetch", "annotate", "cluster", "split", "emit"];
pub const RELATION_STEERING: &str = "one Support and one Undermine request per source claim; replies with the other label are dropped";
pub const SIMILARITY: &str = "cosine";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Hit,
    Computed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Topic id for per-topic stages, `all` otherwise.
    pub scope: String,
    pub key: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageRecord>,
    pub llm_calls: usize,
    pub embed_calls: usize,
    pub source_requests: usize,
    pub out_dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl RunReport {
    /// `Computed` if any scope of `stage` was computed.
    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        let mut found = None;
        for r in self.stages.iter().filter(|r| r.stage == stage) {
            if r.status == StageStatus::Computed {
                return Some(StageStatus::Computed);
            }
            found = Some(r.status);
        }
        found
    }

    pub fn computed_stages(&self) -> Vec<&'static str> {
        STAGES
            .into_iter()
            .filter(|s| self.status(s) == Some(StageStatus::Computed))
            .collect()
    }

    pub fn provider_calls(&self) -> usize {
        self.llm_calls + self.embed_calls + self.source_requests
    }
}

/// A failed run: the stage that failed, the cause, and the stages that had
/// completed (their checkpoints stay on disk).
#[derive(Debug)]
pub struct PipelineFailure {
    pub stage: String,
    pub error: Error,
    pub completed: Vec<StageRecord>,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for PipelineFailure {}

impl PipelineFailure {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

/// JSON files under a cache directory, one per `(stage, key)`.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    dir: PathBuf,
}

impl Checkpoints {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(stage).join(format!("{key}.json"))
    }

    /// An unreadable or corrupt checkpoint counts as a miss.
    pub fn load<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Option<T> {
        let body = fs::read(self.path(stage, key)).ok()?;
        serde_json::from_slice(&body).ok()
    }

    pub fn store<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> Result<()> {
        let path = self.path(stage, key);
        let dir = path.parent().expect("checkpoint has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let body = serde_json::to_vec(value).map_err(|e| Error::json(format!("{stage} checkpoint"), e))?;
        let tmp = path.with_extension(format!("json.tmp-{}", std::process::id()));
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Digest of a value's JSON form.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

/// Digest over every `*.jsonl` file name and body in a corpus directory.
pub fn corpus_digest(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut h = FieldHasher::new("corpus");
    for f in &files {
        let body = fs::read(f).map_err(|e| Error::io(f, e))?;
        h.push(&f.file_name().unwrap_or_default().to_string_lossy());
        h.push_bytes(&body);
    }
    Ok(h.finish())
}

struct CountingSource {
    inner: Arc<dyn SearchSource>,
    calls: AtomicUsize,
}

impl SearchSource for CountingSource {
    fn source_id(&self) -> &str {
        self.inner.source_id()
    }

    fn search(&self, query: &Query, page_token: Option<&str>, page_size: usize) -> Result<SearchPage, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.search(query, page_token, page_size)
    }
}

/// Annotation stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub posts: Vec<Post>,
    pub claims: Vec<ClaimTuple>,
    pub topics: Vec<TopicTuple>,
    pub relations: Vec<RelationTuple>,
    /// Generated relation targets.
    pub targets: Vec<ClaimTuple>,
    pub reports: BTreeMap<String, JobReport>,
    /// Records dropped so far, by reason.
    pub dropped: BTreeMap<String, usize>,
}

/// Cluster stage output: the assignment over claims and targets, the
/// claims kept for emission, and relations rewritten onto representatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustered {
    pub assignment: ClusterAssignment,
    pub claims: Vec<ClaimTuple>,
    pub relations: Vec<RelationTuple>,
    pub dropped: BTreeMap<String, usize>,
}

fn add(map: &mut BTreeMap<String, usize>, key: &str, n: usize) {
    if n > 0 {
        *map.entry(key.to_string()).or_default() += n;
    }
}

fn wrap(stage: &str, e: Error) -> Error {
    match e {
        Error::Validation(v) => Error::Validation(v),
        Error::Stage { stage: inner, message, raw } if inner == stage => Error::Stage { stage: inner, message, raw },
        Error::Stage { stage: inner, message, raw } => Error::Stage {
            stage: stage.to_string(),
            message: format!("{inner}: {message}"),
            raw,
        },
        other => Error::Stage { stage: stage.to_string(), message: other.to_string(), raw: None },
    }
}

/// Providers plus configuration. Provider calls are counted.
pub struct Pipeline {
    pub config: Config,
    llm: Arc<CountingLlm<Arc<dyn LlmProvider>>>,
    embedder: Arc<CountingEmbedder<Arc<dyn Embedder>>>,
    source: Arc<CountingSource>,
    clock: Arc<dyn Clock>,
    prompts: PromptSet,
}

impl Pipeline {
    /// Builds the providers named in `config`. API keys come from the
    /// environment variables the config names.
    pub fn from_config(config: Config) -> Self {
        let llm: Arc<dyn LlmProvider> = match config.llm.kind {
            LlmKind::Mock => Arc::new(MockLlm::new(&config.llm.mock_dir)),
            LlmKind::RuleBased => Arc::new(RuleBasedLlm),
            LlmKind::Http => Arc::new(HttpChatLlm::new(
                &config.llm.endpoint,
                &config.llm.model,
                &config.llm.api_key_env,
                Duration::from_secs(config.llm.timeout_secs),
            )),
        };
        let llm: Arc<dyn LlmProvider> = match &config.llm.record_dir {
            Some(dir) => Arc::new(RecordingLlm::new(llm, dir)),
            None => llm,
        };
        let e = &config.embedding;
        let embedder: Arc<dyn Embedder> = match e.kind {
            EmbeddingKind::Hash => Arc::new(HashEmbedder::new(e.dim, e.seed)),
            EmbeddingKind::Http => Arc::new(HttpEmbedder::new(
                &e.endpoint,
                &e.model,
                &e.api_key_env,
                Duration::from_secs(e.timeout_secs),
            )),
        };
        let s = &config.source;
        let source: Arc<dyn SearchSource> = match s.kind {
            SourceKind::Local => Arc::new(LocalCorpusSource::new(&s.settings.source_id, &s.settings.endpoint)),
            SourceKind::Http => Arc::new(HttpSearchSource::new(
                &s.settings.source_id,
                &s.settings.endpoint,
                s.api_key_env.as_deref(),
                Duration::from_secs(s.timeout_secs),
            )),
        };
        let clock: Arc<dyn Clock> = if config.fixed_clock() {
            Arc::new(ManualClock::epoch())
        } else {
            Arc::new(SystemClock)
        };
        Self::with_providers(config, llm, embedder, source, clock)
    }

    pub fn with_providers(
        config: Config,
        llm: Arc<dyn LlmProvider>,
        embedder: Arc<dyn Embedder>,
        source: Arc<dyn SearchSource>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            config,
            llm: Arc::new(CountingLlm::new(llm)),
            embedder: Arc::new(CountingEmbedder::new(embedder)),
            source: Arc::new(CountingSource { inner: source, calls: AtomicUsize::new(0) }),
            clock,
            prompts: PromptSet::builtin(),
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn llm_calls(&self) -> usize {
        self.llm.calls()
    }

    pub fn embed_calls(&self) -> usize {
        self.embedder.calls()
    }

    pub fn source_requests(&self) -> usize {
        self.source.calls.load(Ordering::SeqCst)
    }

    fn client(&self) -> LlmClient {
        let provider: Arc<dyn LlmProvider> = self.llm.clone();
        let mut c = LlmClient::new(provider, self.clock.clone());
        c.prompts = self.prompts.clone();
        c.policy = self.config.llm.retry;
        c.temperature = self.config.llm.temperature;
        c.max_tokens = self.config.llm.max_tokens;
        c
    }

    fn llm_identity(&self) -> String {
        FieldHasher::new("llm")
            .field(self.llm.name())
            .field(self.llm.model())
            .field(&self.config.llm.temperature.to_string())
            .field(&self.config.llm.max_tokens.to_string())
            .field(&self.prompts.version)
            .field(&self.prompts.digest())
            .finish()
    }

    pub fn topics(&self) -> Result<Vec<Topic>> {
        self.config.resolved_topics()
    }

    pub fn keywords(&self, topic: &Topic) -> Result<KeywordSet> {
        let k = &self.config.keywords;
        generate_keywords(topic, k.heavy_n, k.lesser_n, &self.client(), k.rounds)
    }

    pub fn queries(&self, keywords: &KeywordSet) -> QueryPlan {
        sample_queries(keywords, self.config.queries.count, self.config.seed)
    }

    pub fn fetch(&self, plan: &QueryPlan) -> Result<FetchOutcome> {
        let cfg = &self.config.source.settings;
        if self.config.source.kind == SourceKind::Local {
            corpus_digest(Path::new(&cfg.endpoint))?;
        }
        let limiter = RateLimiter::new(cfg.requests_per_minute);
        fetch_posts(plan, cfg, self.source.as_ref(), &limiter, self.clock.as_ref())
    }

    /// Merges fetched posts across topics and runs the three LLM jobs.
    pub fn annotate(&self, fetches: &[FetchOutcome]) -> Result<Annotations> {
        let mut dropped = BTreeMap::new();
        for f in fetches {
            add(&mut dropped, "too_short_posts", f.report.too_short);
            add(&mut dropped, "duplicate_posts", f.report.duplicates);
        }
        let (mut posts, dups) = dedup_posts(fetches.iter().flat_map(|f| f.posts.iter().cloned()));
        add(&mut dropped, "duplicate_posts", dups);
        posts.sort_by(|a, b| a.post_id.cmp(&b.post_id));

        let a = &self.config.annotate;
        let mut annotator = Annotator::new(self.client());
        annotator.max_claim_chars = a.max_claim_chars;
        annotator.max_failure_rate = a.max_failure_rate;
        annotator.max_in_flight = a.max_in_flight;

        let claims = annotator.extract_claims(&posts)?;
        let labels = annotator.label_topics(&posts, &a.topic_candidates, a.allow_free_form)?;
        let mut reports = BTreeMap::new();
        let (relations, targets) = if claims.claims.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let rel = annotator.generate_relations(&claims.claims)?;
            add(&mut dropped, "relation_label_mismatches", rel.report.label_mismatches);
            add(&mut dropped, "generated_self_relations", rel.report.self_relations);
            reports.insert("relations".to_string(), rel.report);
            (rel.relations, rel.targets)
        };
        add(&mut dropped, "rejected_topic_labels", labels.report.rejected_labels);
        for r in [&claims.report, &labels.report].into_iter().chain(reports.values()) {
            add(&mut dropped, "failed_calls", r.failed);
            add(&mut dropped, "unparsed_completions", r.unparsed);
        }
        reports.insert("claims".to_string(), claims.report);
        reports.insert("topics".to_string(), labels.report);
        Ok(Annotations {
            posts,
            claims: claims.claims,
            topics: labels.topics,
            relations,
            targets,
            reports,
            dropped,
        })
    }

    /// Embeds claims and targets together, clusters them, and rewrites
    /// relations onto cluster representatives. Targets that are not their
    /// cluster's representative are dropped.
    pub fn cluster(&self, ann: &Annotations, cache: &EmbeddingCache) -> Result<Clustered> {
        let mut all: BTreeMap<String, ClaimTuple> = BTreeMap::new();
        for c in ann.claims.iter().chain(&ann.targets) {
            all.insert(c.claim_id.clone(), c.clone());
        }
        if all.is_empty() {
            return Err(Error::invalid("claims", "no claims to cluster"));
        }
        let ids: Vec<String> = all.keys().cloned().collect();
        let texts: Vec<String> = all.values().map(|c| c.claim_text.clone()).collect();
        let opts = EmbedOptions {
            policy: self.config.embedding.retry,
            clock: self.clock.as_ref(),
            batch_size: self.config.embedding.batch_size,
        };
        let vectors = embed_all(&texts, self.embedder.as_ref(), cache, &opts)?;
        cache.save()?;
        let assignment = cluster_claims(&ids, &vectors, &self.config.cluster)?;
        let rewrite = crate::cluster::rewrite_relations(&ann.relations, &assignment)?;
        let mut dropped = BTreeMap::new();
        add(&mut dropped, "merged_self_relations", rewrite.self_relations);
        add(&mut dropped, "duplicate_relations", rewrite.duplicates);
        add(&mut dropped, "conflicting_relations", rewrite.conflicts);
        let mut claims = Vec::new();
        for c in all.into_values() {
            let keep = c.post_id != GENERATED_POST_ID || assignment.representative_of(&c.claim_id) == Some(&c.claim_id);
            if keep {
                claims.push(c);
            } else {
                add(&mut dropped, "merged_targets", 1);
            }
        }
        Ok(Clustered { assignment, claims, relations: rewrite.relations, dropped })
    }

    pub fn split(&self, ann: &Annotations, clustered: &Clustered) -> Result<SplitOutcome> {
        split(
            &ann.posts,
            &clustered.claims,
            &ann.topics,
            &clustered.relations,
            &clustered.assignment,
            &self.config.splits,
            self.config.seed,
        )
    }

    /// Manifest without counts and digests; [`emit`] fills those in.
    pub fn manifest(&self, topics: &[Topic], ann: &Annotations, clustered: &Clustered, split: &SplitOutcome) -> DatasetManifest {
        let mut dropped = ann.dropped.clone();
        for (k, v) in &clustered.dropped {
            add(&mut dropped, k, *v);
        }
        add(&mut dropped, "cross_split_relations", split.report.cross_split_relations);
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            seed: self.config.seed,
            providers: ProviderInfo {
                llm: self.llm.name().to_string(),
                llm_model: self.llm.model().to_string(),
                embedding: self.embedder.name().to_string(),
                embedding_model: self.embedder.model().to_string(),
                source: self.source.source_id().to_string(),
            },
            prompt_version: self.prompts.version.clone(),
            prompt_digest: self.prompts.digest(),
            topics: topics.to_vec(),
            tau: self.config.cluster.tau,
            similarity: SIMILARITY.into(),
            representative_rule: self.config.cluster.representative.as_str().into(),
            relation_steering: RELATION_STEERING.into(),
            split_proportions: self.config.splits,
            counts: BTreeMap::new(),
            digests: BTreeMap::new(),
            dropped,
        }
    }

    fn checkpoints(&self) -> Checkpoints {
        Checkpoints::new(&self.config.cache_dir)
    }

    /// Runs every stage, restoring checkpointed outputs where keys match.
    pub fn run(&self) -> std::result::Result<RunReport, PipelineFailure> {
        let mut records = Vec::new();
        match self.run_inner(&mut records) {
            Ok(manifest) => Ok(RunReport {
                stages: records,
                llm_calls: self.llm_calls(),
                embed_calls: self.embed_calls(),
                source_requests: self.source_requests(),
                out_dir: self.config.out.clone(),
                manifest,
            }),
            Err((stage, error)) => Err(PipelineFailure { stage, error, completed: records }),
        }
    }

    fn stage<T: Serialize + DeserializeOwned>(
        &self,
        records: &mut Vec<StageRecord>,
        stage: &str,
        scope: &str,
        key: String,
        compute: impl FnOnce() -> Result<T>,
    ) -> std::result::Result<T, (String, Error)> {
        let ck = self.checkpoints();
        let fail = |e: Error| (stage.to_string(), wrap(stage, e));
        let (value, status) = match ck.load::<T>(stage, &key) {
            Some(v) => (v, StageStatus::Hit),
            None => {
                let v = compute().map_err(fail)?;
                ck.store(stage, &key, &v).map_err(fail)?;
                (v, StageStatus::Computed)
            }
        };
        records.push(StageRecord { stage: stage.into(), scope: scope.into(), key, status });
        Ok(value)
    }

    fn key(&self, stage: &str, parts: &[&str]) -> String {
        let mut h = FieldHasher::new("stage");
        h.push(env!("CARGO_PKG_VERSION"));
        h.push(stage);
        for p in parts {
            h.push(p);
        }
        h.finish()
    }

    fn run_inner(&self, records: &mut Vec<StageRecord>) -> std::result::Result<DatasetManifest, (String, Error)> {
        let cfg = &self.config;
        let bad = cfg.violations();
        if !bad.is_empty() {
            return Err(("config".into(), Error::Validation(bad)));
        }
        let topics = self.topics().map_err(|e| ("config".to_string(), e))?;
        let llm_id = self.llm_identity();
        let source_state = match cfg.source.kind {
            SourceKind::Local => corpus_digest(Path::new(&cfg.source.settings.endpoint))
                .map_err(|e| ("fetch".to_string(), wrap("fetch", e)))?,
            SourceKind::Http => String::new(),
        };

        let mut fetches = Vec::new();
        for topic in &topics {
            let key = self.key("keywords", &[&digest_of(topic), &digest_of(&cfg.keywords), &llm_id]);
            let ks: KeywordSet = self.stage(records, "keywords", &topic.topic_id, key, || self.keywords(topic))?;

            let key = self.key(
                "queries",
                &[&digest_of(&ks), &cfg.queries.count.to_string(), &cfg.seed.to_string()],
            );
            let plan: QueryPlan = self.stage(records, "queries", &topic.topic_id, key, || Ok(self.queries(&ks)))?;

            let key = self.key("fetch", &[&digest_of(&plan), &digest_of(&cfg.source), &source_state]);
            let fetched: FetchOutcome = self.stage(records, "fetch", &topic.topic_id, key, || self.fetch(&plan))?;
            fetches.push(fetched);
        }

        let key = self.key(
            "annotate",
            &[&digest_of(&fetches), &digest_of(&cfg.annotate), &llm_id],
        );
        let ann: Annotations = self.stage(records, "annotate", "all", key, || self.annotate(&fetches))?;

        let embed_id = format!("{}/{}", self.embedder.name(), self.embedder.model());
        let key = self.key("cluster", &[&digest_of(&ann), &embed_id, &digest_of(&cfg.cluster)]);
        let clustered: Clustered = self.stage(records, "cluster", "all", key, || {
            let cache = EmbeddingCache::open(cfg.cache_dir.join("embeddings.jsonl"))?;
            self.cluster(&ann, &cache)
        })?;

        let key = self.key(
            "split",
            &[&digest_of(&ann), &digest_of(&clustered), &digest_of(&cfg.splits), &cfg.seed.to_string()],
        );
        let split_out: SplitOutcome = self.stage(records, "split", "all", key, || self.split(&ann, &clustered))?;

        let base = self.manifest(&topics, &ann, &clustered, &split_out);
        let key = self.key("emit", &[&digest_of(&split_out.bundles), &digest_of(&base)]);
        let out = cfg.out.clone();
        let ck = self.checkpoints();
        let on_disk = ck.load::<DatasetManifest>("emit", &key).filter(|m| {
            let check = validate_dataset(&out);
            check.is_ok() && check.manifest.as_ref() == Some(m)
        });
        let (manifest, status) = match on_disk {
            Some(m) => (m, StageStatus::Hit),
            None => {
                let fail = |e: Error| ("emit".to_string(), wrap("emit", e));
                let m = emit(&split_out.bundles, base, &out).map_err(fail)?;
                ck.store("emit", &key, &m).map_err(fail)?;
                (m, StageStatus::Computed)
            }
        };
        records.push(StageRecord { stage: "emit".into(), scope: "all".into(), key, status });
        Ok(manifest)
    }
}
