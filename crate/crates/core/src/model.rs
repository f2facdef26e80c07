//! Domain records shared by every stage, their on-disk JSONL schema, and the
//! record validator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::text::{fold_key, normalize_text, FieldHasher};

/// Post id used for claims authored by the LLM during relation generation.
pub const GENERATED_POST_ID: &str = "generated";

/// Separator between the three terms of a rendered query.
pub const QUERY_SEPARATOR: &str = " AND ";

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub topic_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Topic {
    /// Builds a topic whose id is the slug of its title.
    pub fn from_title(title: &str) -> Result<Self> {
        let title = normalize_text(title);
        let topic_id = slugify(&title);
        let topic = Topic {
            topic_id,
            title,
            description: None,
        };
        let v = topic.violations();
        if v.is_empty() {
            Ok(topic)
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.topic_id.trim().is_empty() {
            v.push(Violation::new("topic_id", "empty"));
        }
        if normalize_text(&self.title).is_empty() {
            v.push(Violation::new("title", "empty"));
        }
        v
    }
}

/// Lowercase ASCII alphanumerics joined by single dashes.
pub fn slugify(s: &str) -> String {
    let mut out = String::new();
    let mut dash = false;
    for c in s.chars() {
        if c.is_alphanumeric() {
            if dash && !out.is_empty() {
                out.push('-');
            }
            dash = false;
            out.extend(c.to_lowercase());
        } else {
            dash = true;
        }
    }
    out
}

/// The two keyword groups generated for a topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub topic_id: String,
    /// Terms largely indicative of the topic.
    pub heavy: Vec<String>,
    /// Terms associated with the topic but not exclusive to it.
    pub lesser: Vec<String>,
}

impl KeywordSet {
    /// Normalizes both groups, removes duplicates within each, and drops from
    /// `lesser` any term that also appears in `heavy`.
    pub fn from_groups(
        topic_id: &str,
        heavy: impl IntoIterator<Item = impl AsRef<str>>,
        lesser: impl IntoIterator<Item = impl AsRef<str>>,
    ) -> Result<Self> {
        let heavy = dedup_terms(heavy, &HashSet::new());
        let taken: HashSet<String> = heavy.iter().map(|t| fold_key(t)).collect();
        let lesser = dedup_terms(lesser, &taken);
        let ks = KeywordSet {
            topic_id: topic_id.to_string(),
            heavy,
            lesser,
        };
        let v = ks.violations();
        if v.is_empty() {
            Ok(ks)
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.topic_id.is_empty() {
            v.push(Violation::new("topic_id", "empty"));
        }
        if self.heavy.is_empty() {
            v.push(Violation::new("heavy", "at least one heavy keyword is required"));
        }
        if self.lesser.len() < 2 {
            v.push(Violation::new(
                "lesser",
                "at least two lesser keywords are required",
            ));
        }
        let mut seen = HashSet::new();
        for (group, terms) in [("heavy", &self.heavy), ("lesser", &self.lesser)] {
            let mut local = HashSet::new();
            for t in terms.iter() {
                let key = fold_key(t);
                if key.is_empty() {
                    v.push(Violation::new(group, "empty keyword"));
                    continue;
                }
                if !local.insert(key.clone()) {
                    v.push(Violation::new(group, format!("duplicate keyword {t:?}")));
                } else if !seen.insert(key) {
                    v.push(Violation::new(
                        group,
                        format!("keyword {t:?} appears in both groups"),
                    ));
                }
            }
        }
        v
    }
}

fn dedup_terms(
    terms: impl IntoIterator<Item = impl AsRef<str>>,
    exclude: &HashSet<String>,
) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in terms {
        let term = normalize_text(t.as_ref());
        let key = term.to_lowercase();
        if term.is_empty() || exclude.contains(&key) || !seen.insert(key) {
            continue;
        }
        out.push(term);
    }
    out
}

/// One heavy term plus an unordered pair of lesser terms, AND-joined.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub topic_id: String,
    pub heavy_term: String,
    pub lesser_terms: [String; 2],
    pub rendered: String,
}

impl Query {
    /// The lesser pair is stored in case-folded lexicographic order.
    pub fn new(topic_id: &str, heavy: &str, a: &str, b: &str) -> Self {
        let (first, second) = if (fold_key(a), a) <= (fold_key(b), b) {
            (a, b)
        } else {
            (b, a)
        };
        let rendered = [heavy, first, second].join(QUERY_SEPARATOR);
        Query {
            topic_id: topic_id.to_string(),
            heavy_term: heavy.to_string(),
            lesser_terms: [first.to_string(), second.to_string()],
            rendered,
        }
    }

    pub fn terms(&self) -> [&str; 3] {
        [
            &self.heavy_term,
            &self.lesser_terms[0],
            &self.lesser_terms[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub source_id: String,
    pub text: String,
    pub url: Option<String>,
    pub fetched_at: DateTime<Utc>,
    pub query_ref: String,
    pub topic_id: String,
}

/// Content hash used for cross-query deduplication and as the post id when a
/// source does not supply one.
pub fn content_id(text: &str) -> String {
    let digest = FieldHasher::new("post").field(&normalize_text(text)).finish();
    format!("p{}", &digest[..32])
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClaimTuple {
    pub claim_id: String,
    pub post_id: String,
    pub claim_text: String,
}

impl ClaimTuple {
    pub fn new(post_id: &str, claim_text: &str) -> Result<Self> {
        Ok(ClaimTuple {
            claim_id: claim_id_of(post_id, claim_text)?,
            post_id: post_id.to_string(),
            claim_text: claim_text.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicTuple {
    pub post_id: String,
    pub topic_label: String,
}

/// The closed relation label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    Support,
    Undermine,
}

impl Relation {
    pub const ALL: [Relation; 2] = [Relation::Support, Relation::Undermine];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Support => "Support",
            Relation::Undermine => "Undermine",
        }
    }

    /// Exact label, or its case-insensitive spelling. Anything else is rejected.
    pub fn parse_label(s: &str) -> Option<Relation> {
        match s.trim().to_ascii_lowercase().as_str() {
            "support" => Some(Relation::Support),
            "undermine" => Some(Relation::Undermine),
            _ => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationTuple {
    pub source_claim_id: String,
    pub target_claim_id: String,
    pub relation: Relation,
}

/// Content-derived claim id: a truncated SHA-256 over `(post_id, claim_text)`.
pub fn claim_id_of(post_id: &str, claim_text: &str) -> Result<String> {
    let mut v = Vec::new();
    if post_id.trim().is_empty() {
        v.push(Violation::new("post_id", "empty"));
    }
    if claim_text.trim().is_empty() {
        v.push(Violation::new("claim_text", "empty"));
    }
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    let digest = FieldHasher::new("claim")
        .field(post_id)
        .field(claim_text)
        .finish();
    Ok(format!("c{}", &digest[..32]))
}

/// Claim to cluster map plus one representative claim per cluster.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cluster_of: BTreeMap<String, usize>,
    /// Indexed by cluster id.
    pub representatives: Vec<String>,
}

impl ClusterAssignment {
    pub fn cluster_count(&self) -> usize {
        self.representatives.len()
    }

    pub fn representative_of(&self, claim_id: &str) -> Option<&str> {
        self.cluster_of
            .get(claim_id)
            .map(|&c| self.representatives[c].as_str())
    }

    /// Members of each cluster, sorted by claim id.
    pub fn members(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.representatives.len()];
        for (claim, &c) in &self.cluster_of {
            out[c].push(claim.clone());
        }
        out
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut populated = vec![false; self.representatives.len()];
        for (claim, &c) in &self.cluster_of {
            match populated.get_mut(c) {
                Some(p) => *p = true,
                None => v.push(Violation::new(claim, format!("cluster {c} has no representative"))),
            }
        }
        for (c, rep) in self.representatives.iter().enumerate() {
            if !populated[c] {
                v.push(Violation::new(format!("cluster {c}"), "empty cluster"));
            }
            if self.cluster_of.get(rep) != Some(&c) {
                v.push(Violation::new(
                    format!("cluster {c}"),
                    "representative is not a member",
                ));
            }
        }
        v
    }
}

/// A unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// L2-normalizes `values`; zero, empty, or non-finite input is rejected.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding", "empty vector"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("embedding", "non-finite component"));
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("embedding", "zero vector"));
        }
        Ok(Self {
            values: values.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub llm: String,
    pub llm_model: String,
    pub embedding: String,
    pub embedding_model: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitProportions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitProportions {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

impl SplitProportions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.dev, self.test]
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        for (name, p) in ["train", "dev", "test"].iter().zip(self.as_array()) {
            if !(p.is_finite() && p >= 0.0) {
                v.push(Violation::new(
                    format!("splits.{name}"),
                    "proportion must be non-negative",
                ));
            }
        }
        let sum: f64 = self.as_array().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            v.push(Violation::new("splits", "proportions must sum to 1"));
        }
        v
    }
}

/// Everything needed to reproduce and verify an emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub providers: ProviderInfo,
    pub prompt_version: String,
    pub prompt_digest: String,
    pub topics: Vec<Topic>,
    pub tau: f64,
    pub similarity: String,
    pub representative_rule: String,
    pub relation_steering: String,
    pub split_proportions: SplitProportions,
    /// split -> file name -> record count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// relative path -> SHA-256 of file bytes.
    pub digests: BTreeMap<String, String>,
    /// Records removed on the way, by reason.
    pub dropped: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_at_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator_rule: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    pub query_count: usize,
    pub item_count: usize,
    pub skipped_queries: usize,
}

/// The four JSONL record files of a dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Post,
    Claim,
    Topic,
    Relation,
}

impl RecordKind {
    pub const ALL: [RecordKind; 4] = [
        RecordKind::Post,
        RecordKind::Claim,
        RecordKind::Topic,
        RecordKind::Relation,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            RecordKind::Post => "posts.jsonl",
            RecordKind::Claim => "claims.jsonl",
            RecordKind::Topic => "topics.jsonl",
            RecordKind::Relation => "relations.jsonl",
        }
    }

    pub fn fields(self) -> &'static [&'static str] {
        match self {
            RecordKind::Post => &[
                "post_id",
                "source_id",
                "text",
                "url",
                "fetched_at",
                "query_ref",
                "topic_id",
            ],
            RecordKind::Claim => &["claim_id", "post_id", "claim_text"],
            RecordKind::Topic => &["post_id", "topic_label"],
            RecordKind::Relation => &["source_claim_id", "target_claim_id", "relation"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Post(Post),
    Claim(ClaimTuple),
    Topic(TopicTuple),
    Relation(RelationTuple),
}

/// Ids that references are resolved against.
#[derive(Debug, Default, Clone)]
pub struct RefIndex {
    pub post_ids: HashSet<String>,
    pub claim_ids: HashSet<String>,
}

impl RefIndex {
    pub fn new<'a>(
        posts: impl IntoIterator<Item = &'a Post>,
        claims: impl IntoIterator<Item = &'a ClaimTuple>,
    ) -> Self {
        Self {
            post_ids: posts.into_iter().map(|p| p.post_id.clone()).collect(),
            claim_ids: claims.into_iter().map(|c| c.claim_id.clone()).collect(),
        }
    }
}

fn require_text(v: &mut Vec<Violation>, field: &str, value: &str) {
    if normalize_text(value).is_empty() {
        v.push(Violation::new(field, "empty text"));
    }
}

/// Every invariant violation of one record. With `refs`, references are also
/// checked.
pub fn validate_record(record: &Record, refs: Option<&RefIndex>) -> Vec<Violation> {
    let mut v = Vec::new();
    match record {
        Record::Post(p) => {
            require_text(&mut v, "post_id", &p.post_id);
            require_text(&mut v, "source_id", &p.source_id);
            require_text(&mut v, "text", &p.text);
            require_text(&mut v, "query_ref", &p.query_ref);
            require_text(&mut v, "topic_id", &p.topic_id);
        }
        Record::Claim(c) => {
            require_text(&mut v, "claim_id", &c.claim_id);
            require_text(&mut v, "post_id", &c.post_id);
            require_text(&mut v, "claim_text", &c.claim_text);
            if let Ok(expected) = claim_id_of(&c.post_id, &c.claim_text) {
                if expected != c.claim_id {
                    v.push(Violation::new("claim_id", "does not match content digest"));
                }
            }
            if let Some(refs) = refs {
                if c.post_id != GENERATED_POST_ID && !refs.post_ids.contains(&c.post_id) {
                    v.push(Violation::new(
                        "post_id",
                        format!("dangling reference {}", c.post_id),
                    ));
                }
            }
        }
        Record::Topic(t) => {
            require_text(&mut v, "post_id", &t.post_id);
            require_text(&mut v, "topic_label", &t.topic_label);
            if let Some(refs) = refs {
                if !refs.post_ids.contains(&t.post_id) {
                    v.push(Violation::new(
                        "post_id",
                        format!("dangling reference {}", t.post_id),
                    ));
                }
            }
        }
        Record::Relation(r) => {
            require_text(&mut v, "source_claim_id", &r.source_claim_id);
            require_text(&mut v, "target_claim_id", &r.target_claim_id);
            if r.source_claim_id == r.target_claim_id {
                v.push(Violation::new("target_claim_id", "self-relation"));
            }
            if let Some(refs) = refs {
                for (field, id) in [
                    ("source_claim_id", &r.source_claim_id),
                    ("target_claim_id", &r.target_claim_id),
                ] {
                    if !refs.claim_ids.contains(id) {
                        v.push(Violation::new(field, format!("dangling reference {id}")));
                    }
                }
            }
        }
    }
    v
}

/// Validates one JSONL line against the exact field schema of `kind`, then
/// against the record invariants.
pub fn validate_json_line(
    kind: RecordKind,
    line: &str,
    refs: Option<&RefIndex>,
) -> (Option<Record>, Vec<Violation>) {
    let value: serde_json::Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return (None, vec![Violation::new("line", format!("invalid json: {e}"))]),
    };
    let Some(obj) = value.as_object() else {
        return (None, vec![Violation::new("line", "not a json object")]);
    };
    let mut v = Vec::new();
    let fields = kind.fields();
    for f in fields {
        if !obj.contains_key(*f) {
            v.push(Violation::new(*f, "missing field"));
        }
    }
    for key in obj.keys() {
        if !fields.contains(&key.as_str()) {
            v.push(Violation::new(key.as_str(), "unknown field"));
        }
    }
    if kind == RecordKind::Relation {
        if let Some(label) = obj.get("relation") {
            match label.as_str() {
                Some(s) if s == "Support" || s == "Undermine" => {}
                _ => v.push(Violation::new("relation", format!("unknown label {label}"))),
            }
        }
    }
    if !v.is_empty() {
        return (None, v);
    }
    let parsed = match kind {
        RecordKind::Post => serde_json::from_value(value).map(Record::Post),
        RecordKind::Claim => serde_json::from_value(value).map(Record::Claim),
        RecordKind::Topic => serde_json::from_value(value).map(Record::Topic),
        RecordKind::Relation => serde_json::from_value(value).map(Record::Relation),
    };
    match parsed {
        Ok(record) => {
            let v = validate_record(&record, refs);
            (Some(record), v)
        }
        Err(e) => (None, vec![Violation::new("line", format!("schema: {e}"))]),
    }
}
