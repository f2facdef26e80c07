//! Social-media search sources and post retrieval for a query plan.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{retry, Clock, RateLimiter, RetryPolicy};
use crate::error::{Error, FailureKind, ProviderError, Result, Violation};
use crate::keywords::QueryPlan;
use crate::model::{content_id, Post, Query};
use crate::text::{fold_key, normalize_text};

pub const DEFAULT_MAX_POSTS_PER_QUERY: usize = 100;
pub const DEFAULT_MIN_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub source_id: String,
    /// Corpus directory for local sources, base URL for HTTP sources.
    pub endpoint: String,
    pub page_size: usize,
    pub max_posts_per_query: usize,
    pub requests_per_minute: u32,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// Posts with fewer whitespace-separated tokens are dropped.
    pub min_tokens: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            source_id: "local".into(),
            endpoint: "corpus".into(),
            page_size: 25,
            max_posts_per_query: DEFAULT_MAX_POSTS_PER_QUERY,
            requests_per_minute: 60,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            min_tokens: DEFAULT_MIN_TOKENS,
        }
    }
}

impl SourceConfig {
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.source_id.trim().is_empty() {
            v.push(Violation::new("source.source_id", "empty"));
        }
        if self.endpoint.trim().is_empty() {
            v.push(Violation::new("source.endpoint", "empty"));
        }
        for (key, value) in [
            ("source.page_size", self.page_size),
            ("source.max_posts_per_query", self.max_posts_per_query),
            ("source.requests_per_minute", self.requests_per_minute as usize),
            ("source.max_in_flight", self.max_in_flight),
            ("source.retry.max_attempts", self.retry.max_attempts as usize),
        ] {
            if value == 0 {
                v.push(Violation::new(key, "must be positive"));
            }
        }
        if !(self.retry.multiplier.is_finite() && self.retry.multiplier > 0.0) {
            v.push(Violation::new("source.retry.multiplier", "must be positive"));
        }
        v
    }
}

/// A post as a source returns it, before normalization.
///
/// Unknown fields, including any author identifiers, are ignored on read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPost {
    #[serde(default)]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchPage {
    pub items: Vec<RawPost>,
    #[serde(default)]
    pub next: Option<String>,
}

/// One page of results per call; pagination and retries are driven by
/// [`fetch_posts`].
pub trait SearchSource: Send + Sync {
    fn source_id(&self) -> &str;
    fn search(
        &self,
        query: &Query,
        page_token: Option<&str>,
        page_size: usize,
    ) -> Result<SearchPage, ProviderError>;
}

/// True when `text` contains every query term, case-insensitively.
pub fn matches_all_terms(text: &str, query: &Query) -> bool {
    let haystack = fold_key(text);
    query.terms().iter().all(|t| haystack.contains(&fold_key(t)))
}

fn read_corpus(corpus_dir: &Path) -> Result<Vec<RawPost>> {
    let mut files: Vec<PathBuf> = fs::read_dir(corpus_dir)
        .map_err(|e| Error::io(corpus_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for file in files {
        let body = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        for (n, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawPost = serde_json::from_str(line).map_err(|e| {
                Error::json(format!("{} line {}", file.display(), n + 1), e)
            })?;
            out.push(raw);
        }
    }
    Ok(out)
}

/// Posts in `corpus_dir/*.jsonl` containing all three query terms.
pub fn local_corpus_search(query: &Query, corpus_dir: &Path) -> Result<Vec<RawPost>> {
    Ok(read_corpus(corpus_dir)?
        .into_iter()
        .filter(|p| matches_all_terms(&p.text, query))
        .collect())
}

/// Offline source over a directory of JSONL files. Page tokens are offsets.
pub struct LocalCorpusSource {
    source_id: String,
    dir: PathBuf,
    corpus: OnceLock<Vec<RawPost>>,
}

impl LocalCorpusSource {
    pub fn new(source_id: &str, dir: impl Into<PathBuf>) -> Self {
        Self {
            source_id: source_id.to_string(),
            dir: dir.into(),
            corpus: OnceLock::new(),
        }
    }

    /// Reads the corpus eagerly so unreadable files surface as stage errors.
    pub fn load(self) -> Result<Self> {
        let posts = read_corpus(&self.dir)?;
        let _ = self.corpus.set(posts);
        Ok(self)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl SearchSource for LocalCorpusSource {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn search(
        &self,
        query: &Query,
        page_token: Option<&str>,
        page_size: usize,
    ) -> Result<SearchPage, ProviderError> {
        let corpus = match self.corpus.get() {
            Some(c) => c,
            None => {
                let posts = read_corpus(&self.dir).map_err(|e| ProviderError::fatal(e.to_string()))?;
                self.corpus.get_or_init(|| posts)
            }
        };
        let offset: usize = match page_token {
            Some(t) => t
                .parse()
                .map_err(|_| ProviderError::fatal(format!("bad page token {t:?}")))?,
            None => 0,
        };
        let matching: Vec<&RawPost> = corpus
            .iter()
            .filter(|p| matches_all_terms(&p.text, query))
            .collect();
        let end = (offset + page_size).min(matching.len());
        let items = matching
            .get(offset..end)
            .unwrap_or_default()
            .iter()
            .map(|p| (*p).clone())
            .collect();
        let next = (end < matching.len()).then(|| end.to_string());
        Ok(SearchPage { items, next })
    }
}

/// Generic JSON search API: `GET {endpoint}?q=..&limit=..[&page_token=..]`
/// answering `{"items": [...], "next": "..."}`.
pub struct HttpSearchSource {
    source_id: String,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpSearchSource {
    pub fn new(source_id: &str, endpoint: &str, api_key_env: Option<&str>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            source_id: source_id.to_string(),
            endpoint: endpoint.to_string(),
            api_key: api_key_env.and_then(|k| std::env::var(k).ok()).filter(|k| !k.is_empty()),
            agent,
        }
    }

    /// Accepts `next`, `next_page_token` or `after` as the continuation field.
    pub fn parse_page(body: &serde_json::Value) -> Result<SearchPage, ProviderError> {
        let items = body
            .get("items")
            .cloned()
            .ok_or_else(|| ProviderError::fatal("response has no items"))?;
        let items: Vec<RawPost> = serde_json::from_value(items)
            .map_err(|e| ProviderError::fatal(format!("bad items: {e}")))?;
        let next = ["next", "next_page_token", "after"]
            .iter()
            .find_map(|k| body.get(*k).and_then(|v| v.as_str()))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        Ok(SearchPage { items, next })
    }
}

impl SearchSource for HttpSearchSource {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn search(
        &self,
        query: &Query,
        page_token: Option<&str>,
        page_size: usize,
    ) -> Result<SearchPage, ProviderError> {
        let mut req = self
            .agent
            .get(&self.endpoint)
            .query("q", &query.rendered)
            .query("limit", page_size.to_string());
        if let Some(token) = page_token {
            req = req.query("page_token", token);
        }
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.call().map_err(crate::llm::classify_http_error)?;
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::transient(format!("reading response: {e}")))?;
        Self::parse_page(&body)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFetch {
    pub query: String,
    pub requests: usize,
    pub retrieved: usize,
    /// Transport failure that ended this query early, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReport {
    pub queries: Vec<QueryFetch>,
    pub requests: usize,
    pub too_short: usize,
    pub duplicates: usize,
    pub failed_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchOutcome {
    pub posts: Vec<Post>,
    pub report: FetchReport,
}

struct QueryResult {
    fetch: QueryFetch,
    items: Vec<RawPost>,
}

fn fetch_one(
    query: &Query,
    cfg: &SourceConfig,
    source: &dyn SearchSource,
    limiter: &RateLimiter,
    clock: &dyn Clock,
    too_short: &Mutex<usize>,
) -> Result<QueryResult> {
    let mut fetch = QueryFetch {
        query: query.rendered.clone(),
        ..QueryFetch::default()
    };
    let mut items = Vec::new();
    let mut token: Option<String> = None;
    loop {
        let page = retry(
            &cfg.retry,
            clock,
            |e: &ProviderError| e.kind == FailureKind::Transient,
            |_| {
                limiter.acquire(clock);
                fetch.requests += 1;
                source.search(query, token.as_deref(), cfg.page_size)
            },
        );
        let page = match page {
            Ok(p) => p.value,
            Err(failed) if failed.value.kind == FailureKind::Auth => {
                return Err(Error::stage(
                    "fetch",
                    format!("{} rejected credentials: {}", source.source_id(), failed.value),
                ));
            }
            Err(failed) => {
                fetch.error = Some(format!("after {} attempt(s): {}", failed.attempts, failed.value));
                break;
            }
        };
        for raw in page.items {
            if items.len() >= cfg.max_posts_per_query {
                break;
            }
            let text = normalize_text(&raw.text);
            if text.split(' ').filter(|t| !t.is_empty()).count() < cfg.min_tokens {
                *too_short.lock().unwrap() += 1;
                continue;
            }
            items.push(RawPost { text, ..raw });
        }
        if items.len() >= cfg.max_posts_per_query {
            break;
        }
        match page.next {
            Some(next) => token = Some(next),
            None => break,
        }
    }
    fetch.retrieved = items.len();
    Ok(QueryResult { fetch, items })
}

/// Retrieves posts for every query of `plan`.
///
/// Queries run concurrently up to `cfg.max_in_flight`, sharing one rate
/// limiter. Results are merged in plan order and deduplicated by content
/// hash, so the first query to return a post owns it. A query whose
/// transport keeps failing is recorded in the report and skipped; failed
/// authentication aborts the stage.
pub fn fetch_posts(
    plan: &QueryPlan,
    cfg: &SourceConfig,
    source: &dyn SearchSource,
    limiter: &RateLimiter,
    clock: &dyn Clock,
) -> Result<FetchOutcome> {
    let bad = cfg.violations();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    if plan.queries.is_empty() {
        return Err(Error::invalid("plan", "no queries"));
    }
    let fetched_at = clock.now();
    let too_short = Mutex::new(0usize);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| Error::stage("fetch", e.to_string()))?;
    let results: Vec<Result<QueryResult>> = pool.install(|| {
        use rayon::prelude::*;
        plan.queries
            .par_iter()
            .map(|q| fetch_one(q, cfg, source, limiter, clock, &too_short))
            .collect()
    });

    let mut report = FetchReport::default();
    let mut seen = HashSet::new();
    let mut used_ids: HashMap<String, String> = HashMap::new();
    let mut posts = Vec::new();
    for (query, result) in plan.queries.iter().zip(results) {
        let QueryResult { fetch, items } = result?;
        report.requests += fetch.requests;
        if fetch.error.is_some() {
            report.failed_queries += 1;
        }
        report.queries.push(fetch);
        for raw in items {
            let hash = content_id(&raw.text);
            if !seen.insert(hash.clone()) {
                report.duplicates += 1;
                continue;
            }
            let native = raw
                .id
                .as_deref()
                .map(str::trim)
                .filter(|id| !id.is_empty())
                .map(|id| format!("{}:{id}", source.source_id()));
            let post_id = match native {
                Some(id) if !used_ids.contains_key(&id) => id,
                _ => hash.clone(),
            };
            used_ids.insert(post_id.clone(), hash);
            posts.push(Post {
                post_id,
                source_id: source.source_id().to_string(),
                text: raw.text,
                url: raw.url,
                fetched_at,
                query_ref: query.rendered.clone(),
                topic_id: plan.topic_id.clone(),
            });
        }
    }
    report.too_short = too_short.into_inner().unwrap();
    Ok(FetchOutcome { posts, report })
}

/// Keeps the first post for each content hash, preserving order.
pub fn dedup_posts(posts: impl IntoIterator<Item = Post>) -> (Vec<Post>, usize) {
    let mut seen = HashSet::new();
    let mut ids = HashSet::new();
    let mut dropped = 0;
    let mut out = Vec::new();
    for post in posts {
        if !seen.insert(content_id(&post.text)) || !ids.insert(post.post_id.clone()) {
            dropped += 1;
            continue;
        }
        out.push(post);
    }
    (out, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::KeywordSet;

    fn query(h: &str, a: &str, b: &str) -> Query {
        Query::new("t", h, a, b)
    }

    fn plan(queries: Vec<Query>) -> QueryPlan {
        QueryPlan { topic_id: "t".into(), requested_count: queries.len(), seed: 0, queries, truncated: false }
    }

    fn write_corpus(dir: &Path, name: &str, texts: &[&str]) {
        let body: String = texts
            .iter()
            .enumerate()
            .map(|(i, t)| serde_json::json!({"id": format!("{name}-{i}"), "text": t, "author": "someone"}).to_string() + "\n")
            .collect();
        fs::write(dir.join(format!("{name}.jsonl")), body).unwrap();
    }

    #[test]
    fn and_semantics() {
        let q = query("h1", "l1", "l2");
        assert!(matches_all_terms("H1 then l1 and L2 too", &q));
        assert!(!matches_all_terms("h1 and l1 only", &q));
    }

    #[test]
    fn local_search_returns_matching_files() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "a", &["h1 l1 l2 first", "h1 l1 nothing"]);
        write_corpus(dir.path(), "b", &["second l2 l1 h1 post", "third h1 l1 l2 post"]);
        let q = query("h1", "l1", "l2");
        assert_eq!(local_corpus_search(&q, dir.path()).unwrap().len(), 3);

        let source = LocalCorpusSource::new("local", dir.path()).load().unwrap();
        let out = fetch_posts(&plan(vec![q]), &SourceConfig::default(), &source, &RateLimiter::new(60), &ManualClock::epoch()).unwrap();
        let ids: Vec<_> = out.posts.iter().map(|p| p.post_id.as_str()).collect();
        assert_eq!(ids, vec!["local:a-0", "local:b-0", "local:b-1"]);
        let again = fetch_posts(&plan(vec![query("h1", "l1", "l2")]), &SourceConfig::default(), &source, &RateLimiter::new(60), &ManualClock::epoch()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn unreadable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
        let err = local_corpus_search(&query("a", "b", "c"), dir.path()).unwrap_err();
        assert!(err.to_string().contains("bad.jsonl"), "{err}");
    }

    #[test]
    fn identical_bodies_across_queries_dedup() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "a", &["alpha beta gamma delta"]);
        write_corpus(dir.path(), "b", &["alpha  beta gamma delta"]);
        let source = LocalCorpusSource::new("local", dir.path());
        let p = plan(vec![query("alpha", "beta", "gamma"), query("alpha", "beta", "delta")]);
        let out = fetch_posts(&p, &SourceConfig::default(), &source, &RateLimiter::new(60), &ManualClock::epoch()).unwrap();
        assert_eq!(out.posts.len(), 1);
        assert_eq!(out.posts[0].query_ref, "alpha AND beta AND gamma");
        assert_eq!(out.report.duplicates, 3);
    }

    #[test]
    fn short_posts_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "a", &["h l1 l2", "h l1"]);
        let source = LocalCorpusSource::new("local", dir.path());
        let cfg = SourceConfig { min_tokens: 4, ..SourceConfig::default() };
        let out = fetch_posts(&plan(vec![query("h", "l1", "l2")]), &cfg, &source, &RateLimiter::new(60), &ManualClock::epoch()).unwrap();
        assert!(out.posts.is_empty());
        assert_eq!(out.report.too_short, 1);
    }

    #[test]
    fn http_page_shapes() {
        let body = serde_json::json!({"items": [{"id": "1", "text": "x y z", "author": "a"}], "next_page_token": "abc"});
        let page = HttpSearchSource::parse_page(&body).unwrap();
        assert_eq!(page.next.as_deref(), Some("abc"));
        assert_eq!(page.items[0].id.as_deref(), Some("1"));
        assert!(HttpSearchSource::parse_page(&serde_json::json!({})).is_err());
    }

    #[test]
    fn empty_plan_and_bad_config_rejected() {
        let source = LocalCorpusSource::new("local", "/nonexistent");
        let limiter = RateLimiter::new(1);
        let clock = ManualClock::epoch();
        assert!(fetch_posts(&plan(vec![]), &SourceConfig::default(), &source, &limiter, &clock).is_err());
        let cfg = SourceConfig { page_size: 0, ..SourceConfig::default() };
        let ks = KeywordSet::from_groups("t", ["a"], ["b", "c"]).unwrap();
        let p = crate::keywords::sample_queries(&ks, 1, 0);
        assert_eq!(fetch_posts(&p, &cfg, &source, &limiter, &clock).unwrap_err().exit_code(), 1);
    }
}
