use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::{JobKind, LlmProvider, LlmRequest, ProviderError};
use crate::model::Relation;
use crate::text::{fold_key, FieldHasher};

/// File stem under which a mock fixture for `(kind, user text)` is stored.
pub fn fixture_key(kind: JobKind, user: &str) -> String {
    FieldHasher::new("fixture")
        .field(kind.tag())
        .field(user)
        .finish()
}

/// Replays completions from `<dir>/<fixture_key>.txt`.
pub struct MockLlm {
    dir: PathBuf,
}

impl MockLlm {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn fixture_path(&self, kind: JobKind, user: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", fixture_key(kind, user)))
    }

    /// Writes the fixture that answers `(kind, user)` with `completion`.
    pub fn write_fixture(dir: &Path, kind: JobKind, user: &str, completion: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}.txt", fixture_key(kind, user))), completion)
    }
}

impl LlmProvider for MockLlm {
    fn name(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        "fixtures"
    }

    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        let path = self.fixture_path(req.kind, &req.user);
        fs::read_to_string(&path).map_err(|e| {
            ProviderError::fatal(format!(
                "no {} fixture at {}: {e}",
                req.kind.tag(),
                path.display()
            ))
        })
    }
}

/// Passes calls through to `inner` and saves each completion as a mock fixture.
pub struct RecordingLlm<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: LlmProvider> RecordingLlm<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into() }
    }
}

impl<P: LlmProvider> LlmProvider for RecordingLlm<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        let out = self.inner.call(req)?;
        MockLlm::write_fixture(&self.dir, req.kind, &req.user, &out)
            .map_err(|e| ProviderError::fatal(format!("writing fixture: {e}")))?;
        Ok(out)
    }
}

/// Counts transport calls made through it.
pub struct CountingLlm<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: LlmProvider> CountingLlm<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: LlmProvider> LlmProvider for CountingLlm<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.call(req)
    }
}

const LESSER_VOCAB: &[&str] = &[
    "rumor", "viral", "share", "truth", "report", "official", "warning", "update", "news",
    "video", "government", "community", "family", "money", "rules", "law", "policy",
    "deadline", "scam", "friends", "experts", "leak", "story", "message",
];

const HEAVY_SUFFIXES: &[&str] = &[
    "news", "rumor", "claim", "policy", "update", "facts", "myth", "debate", "change", "crisis",
];

/// Deterministic offline stand-in for a chat model.
///
/// Answers from the request's prompt inputs with simple text heuristics:
/// keywords from the topic title plus a fixed vocabulary, declarative
/// sentences as claims, candidate labels by word overlap, and templated
/// target claims.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleBasedLlm;

impl RuleBasedLlm {
    fn keywords(req: &LlmRequest) -> Value {
        let input = |k: &str| req.inputs.get(k).unwrap_or_default();
        let topic = input("topic");
        let heavy_n: usize = input("heavy_n").parse().unwrap_or(10);
        let lesser_n: usize = input("lesser_n").parse().unwrap_or(20);
        let mut heavy = vec![topic.to_lowercase()];
        for suffix in HEAVY_SUFFIXES {
            heavy.push(format!("{} {suffix}", topic.to_lowercase()));
        }
        heavy.truncate(heavy_n);
        let taken: Vec<String> = heavy.iter().map(|h| fold_key(h)).collect();
        let mut lesser: Vec<String> = LESSER_VOCAB
            .iter()
            .map(|s| s.to_string())
            .filter(|s| !taken.contains(s))
            .collect();
        let mut i = 1;
        while lesser.len() < lesser_n {
            lesser.push(format!("related term {i}"));
            i += 1;
        }
        lesser.truncate(lesser_n);
        json!({ "heavy": heavy, "lesser": lesser })
    }

    fn claims(req: &LlmRequest) -> Value {
        let post = req.inputs.get("post").unwrap_or_default();
        let claims: Vec<String> = split_sentences(post)
            .into_iter()
            .filter(|s| !s.ends_with('?') && s.split_whitespace().count() >= 4)
            .take(3)
            .collect();
        json!({ "claims": claims })
    }

    fn topics(req: &LlmRequest) -> Value {
        let post = fold_key(req.inputs.get("post").unwrap_or_default());
        let words: Vec<&str> = post
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let candidates = req.inputs.get("candidates").unwrap_or("(none)");
        if candidates == "(none)" {
            let label = words
                .iter()
                .filter(|w| w.chars().count() >= 6)
                .max_by_key(|w| (w.chars().count(), std::cmp::Reverse(**w)))
                .map(|w| w.to_string());
            return json!({ "topics": label.into_iter().collect::<Vec<_>>() });
        }
        let picked: Vec<&str> = candidates
            .split("; ")
            .filter(|cand| {
                let cand_words: Vec<String> = fold_key(cand)
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| w.len() > 3)
                    .map(str::to_string)
                    .collect();
                let hits = cand_words.iter().filter(|w| words.contains(&w.as_str())).count();
                !cand_words.is_empty() && hits * 2 >= cand_words.len()
            })
            .collect();
        json!({ "topics": picked })
    }

    fn relation(req: &LlmRequest) -> Value {
        let claim = req.inputs.get("claim").unwrap_or_default();
        let label = req.inputs.get("label").unwrap_or("Support");
        let body = lower_first(claim.trim_end_matches(['.', '!']));
        let target = match Relation::parse_label(label) {
            Some(Relation::Undermine) => format!("There is no evidence that {body}."),
            _ => format!("Official records confirm that {body}."),
        };
        json!({ "target": target, "relation": label })
    }
}

/// Lowercases a leading capital unless the first word is all caps.
fn lower_first(s: &str) -> String {
    let first_word = s.split_whitespace().next().unwrap_or("");
    if first_word.chars().filter(|c| c.is_alphabetic()).count() > 1
        && !first_word.chars().any(|c| c.is_lowercase())
    {
        return s.to_string();
    }
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = current.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            current.clear();
        }
    }
    let s = current.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

impl LlmProvider for RuleBasedLlm {
    fn name(&self) -> &str {
        "rule-based"
    }

    fn model(&self) -> &str {
        "heuristic-v1"
    }

    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        let value = match req.kind {
            JobKind::Keywords => Self::keywords(req),
            JobKind::ClaimExtract => Self::claims(req),
            JobKind::TopicLabel => Self::topics(req),
            JobKind::RelationGen => Self::relation(req),
        };
        Ok(value.to_string())
    }
}

/// OpenAI-style chat completions over HTTP.
pub struct HttpChatLlm {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatLlm {
    /// Reads the API key from the environment variable `api_key_env`.
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            agent,
        }
    }

    pub fn request_body(req: &LlmRequest) -> Value {
        json!({
            "model": req.model,
            "messages": [
                { "role": "system", "content": req.system },
                { "role": "user", "content": req.user },
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    /// Pulls the completion text out of the common vendor envelopes.
    pub fn extract_text(body: &Value) -> Option<String> {
        let candidates = [
            body.pointer("/choices/0/message/content"),
            body.pointer("/choices/0/text"),
            body.pointer("/content/0/text"),
            body.pointer("/message/content"),
            body.pointer("/output_text"),
            body.pointer("/completion"),
            body.pointer("/response"),
        ];
        candidates
            .into_iter()
            .flatten()
            .find_map(|v| v.as_str().map(str::to_string))
    }
}

pub(crate) fn classify_http_error(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::StatusCode(code @ (401 | 403)) => {
            ProviderError::auth(format!("http status {code}"))
        }
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            ProviderError::transient(format!("http status {code}"))
        }
        ureq::Error::StatusCode(code) => ProviderError::fatal(format!("http status {code}")),
        other => ProviderError::transient(other.to_string()),
    }
}

impl LlmProvider for HttpChatLlm {
    fn name(&self) -> &str {
        "http-chat"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        let Some(key) = &self.api_key else {
            return Err(ProviderError::auth("api key environment variable is not set"));
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(Self::request_body(req))
            .map_err(classify_http_error)?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::transient(format!("reading response: {e}")))?;
        Self::extract_text(&body)
            .ok_or_else(|| ProviderError::fatal("response has no completion text"))
    }
}
