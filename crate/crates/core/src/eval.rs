//! Retrieval and classification metrics over provider embeddings or
//! prediction files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{embed_all, EmbedOptions, Embedder, EmbeddingCache};
use crate::error::{Error, Result, Violation};
use crate::model::{ClassScores, EvalReport, Relation};
use crate::dataset::Bundle;

pub const DEFAULT_K: usize = 20;
pub const DENOMINATOR_RULE: &str = "min(|relevant|, k)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub cand_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub cand_id: String,
}

/// One line of a JSONL qrels file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum QrelsLine {
    Judgment(Judgment),
    Query(EvalQuery),
    Candidate(Candidate),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub queries: Vec<EvalQuery>,
    pub candidates: Vec<Candidate>,
    pub relevance: BTreeSet<(String, String)>,
}

impl Qrels {
    pub fn relevant(&self, query_id: &str) -> BTreeSet<String> {
        self.relevance
            .iter()
            .filter(|(q, _)| q == query_id)
            .map(|(_, c)| c.clone())
            .collect()
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut qids = BTreeSet::new();
        for q in &self.queries {
            if !qids.insert(q.query_id.as_str()) {
                v.push(Violation::new("queries", format!("duplicate query_id {}", q.query_id)));
            }
        }
        let mut cids = BTreeSet::new();
        for c in &self.candidates {
            if !cids.insert(c.cand_id.as_str()) {
                v.push(Violation::new("candidates", format!("duplicate cand_id {}", c.cand_id)));
            }
        }
        for (q, c) in &self.relevance {
            if !qids.contains(q.as_str()) {
                v.push(Violation::new("relevance", format!("unknown query_id {q}")));
            }
            if !cids.contains(c.as_str()) {
                v.push(Violation::new("relevance", format!("unknown cand_id {c}")));
            }
        }
        v
    }

    /// Reads `.tsv` (rows `q id text`, `c id text`, `r query_id cand_id`) or
    /// JSONL with one query, candidate or judgment object per line.
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tsv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
        let qrels = if tsv { Self::parse_tsv(&body)? } else { Self::parse_jsonl(&body)? };
        let bad = qrels.violations();
        if bad.is_empty() {
            Ok(qrels)
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn parse_jsonl(body: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: QrelsLine = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("line {}", n + 1), e.to_string()))?;
            match parsed {
                QrelsLine::Judgment(j) => {
                    out.relevance.insert((j.query_id, j.cand_id));
                }
                QrelsLine::Query(q) => out.queries.push(q),
                QrelsLine::Candidate(c) => out.candidates.push(c),
            }
        }
        Ok(out)
    }

    pub fn parse_tsv(body: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.splitn(3, '\t').collect();
            let bad = || Error::invalid(format!("line {}", n + 1), "expected 3 tab-separated columns");
            let [tag, a, b] = cols[..] else { return Err(bad()) };
            match tag {
                "q" => out.queries.push(EvalQuery { query_id: a.into(), text: b.into() }),
                "c" => out.candidates.push(Candidate { cand_id: a.into(), text: b.into() }),
                "r" => {
                    out.relevance.insert((a.into(), b.into()));
                }
                other => {
                    return Err(Error::invalid(format!("line {}", n + 1), format!("unknown row tag {other:?}")))
                }
            }
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::new();
        for q in &self.queries {
            lines.push(serde_json::to_string(q).expect("serializable"));
        }
        for c in &self.candidates {
            lines.push(serde_json::to_string(c).expect("serializable"));
        }
        for (q, c) in &self.relevance {
            let j = Judgment { query_id: q.clone(), cand_id: c.clone() };
            lines.push(serde_json::to_string(&j).expect("serializable"));
        }
        lines.into_iter().map(|l| l + "\n").collect()
    }

    /// Posts as queries, claims as candidates, each post relevant to the
    /// claims extracted from it.
    pub fn claim_matching(bundle: &Bundle) -> Self {
        Self {
            queries: bundle
                .posts
                .iter()
                .map(|p| EvalQuery { query_id: p.post_id.clone(), text: p.text.clone() })
                .collect(),
            candidates: bundle
                .claims
                .iter()
                .map(|c| Candidate { cand_id: c.claim_id.clone(), text: c.claim_text.clone() })
                .collect(),
            relevance: bundle
                .claims
                .iter()
                .filter(|c| bundle.posts.iter().any(|p| p.post_id == c.post_id))
                .map(|c| (c.post_id.clone(), c.claim_id.clone()))
                .collect(),
        }
    }

    /// Topic labels as queries, posts as candidates.
    pub fn topic_retrieval(bundle: &Bundle) -> Self {
        let labels: BTreeSet<&str> = bundle.topics.iter().map(|t| t.topic_label.as_str()).collect();
        Self {
            queries: labels
                .iter()
                .map(|l| EvalQuery { query_id: l.to_string(), text: l.to_string() })
                .collect(),
            candidates: bundle
                .posts
                .iter()
                .map(|p| Candidate { cand_id: p.post_id.clone(), text: p.text.clone() })
                .collect(),
            relevance: bundle
                .topics
                .iter()
                .map(|t| (t.topic_label.clone(), t.post_id.clone()))
                .collect(),
        }
    }
}

/// Per query, candidates in descending score order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ranked: BTreeMap<String, Vec<(String, f64)>>,
}

impl Ranking {
    /// Orders each query's scores descending, ties by cand_id.
    pub fn from_scores(scores: BTreeMap<String, Vec<(String, f64)>>) -> Self {
        let ranked = scores
            .into_iter()
            .map(|(q, mut list)| {
                list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                let mut seen = BTreeSet::new();
                list.retain(|(c, _)| seen.insert(c.clone()));
                (q, list)
            })
            .collect();
        Self { ranked }
    }

    /// Reads JSONL lines `{query_id, cand_id, score}`.
    pub fn parse_jsonl(body: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            query_id: String,
            cand_id: String,
            score: f64,
        }
        let mut scores: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (n, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: Line = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("line {}", n + 1), e.to_string()))?;
            if !seen.insert((l.query_id.clone(), l.cand_id.clone())) {
                return Err(Error::invalid(
                    format!("line {}", n + 1),
                    format!("duplicate candidate {} for query {}", l.cand_id, l.query_id),
                ));
            }
            scores.entry(l.query_id).or_default().push((l.cand_id, l.score));
        }
        Ok(Self::from_scores(scores))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (q, list) in &self.ranked {
            for (c, score) in list {
                let line = serde_json::json!({"query_id": q, "cand_id": c, "score": score});
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn ids(&self, query_id: &str) -> Vec<&str> {
        self.ranked
            .get(query_id)
            .map(|l| l.iter().map(|(c, _)| c.as_str()).collect())
            .unwrap_or_default()
    }
}

/// Ranks every candidate for every query by cosine similarity of embeddings.
pub fn rank_by_embedding(
    qrels: &Qrels,
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    opts: &EmbedOptions<'_>,
) -> Result<Ranking> {
    let bad = qrels.violations();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    if qrels.queries.is_empty() || qrels.candidates.is_empty() {
        return Err(Error::invalid("qrels", "no queries or no candidates"));
    }
    let texts: Vec<String> = qrels
        .queries
        .iter()
        .map(|q| q.text.clone())
        .chain(qrels.candidates.iter().map(|c| c.text.clone()))
        .collect();
    let vectors = embed_all(&texts, embedder, cache, opts)?;
    let (qv, cv) = vectors.split_at(qrels.queries.len());
    let scores: BTreeMap<String, Vec<(String, f64)>> = qrels
        .queries
        .par_iter()
        .zip(qv)
        .map(|(q, v)| {
            let list = qrels
                .candidates
                .iter()
                .zip(cv)
                .map(|(c, w)| (c.cand_id.clone(), v.cosine(w)))
                .collect();
            (q.query_id.clone(), list)
        })
        .collect();
    Ok(Ranking::from_scores(scores))
}

/// Truncated average precision: the sum of precision at each relevant rank
/// within the top `k`, over `min(|relevant|, k)`. Zero when nothing is
/// relevant or `k` is zero.
pub fn average_precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let denom = relevant.len().min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut seen = BTreeSet::new();
    for (i, id) in ranked.iter().take(k).enumerate() {
        let id = id.as_ref();
        if relevant.contains(id) && seen.insert(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Unweighted mean of AP@k over queries with at least one relevant candidate.
pub fn map_at_k(ranking: &Ranking, qrels: &Qrels, k: usize) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::invalid("k", "k must be at least 1"));
    }
    let mut relevant: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for (q, c) in &qrels.relevance {
        relevant.entry(q.as_str()).or_default().insert(c.clone());
    }
    let mut total = 0.0;
    let mut scored = 0;
    let mut skipped = 0;
    for q in &qrels.queries {
        match relevant.get(q.query_id.as_str()) {
            Some(rel) if !rel.is_empty() => {
                total += average_precision_at_k(&ranking.ids(&q.query_id), rel, k);
                scored += 1;
            }
            _ => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(Error::invalid("qrels", "no query has a relevant candidate"));
    }
    Ok(EvalReport {
        task: "map".into(),
        k: Some(k),
        map_at_k: Some(total / scored as f64),
        denominator_rule: Some(DENOMINATOR_RULE.into()),
        per_class: Vec::new(),
        macro_f1: None,
        query_count: scored,
        item_count: qrels.candidates.len(),
        skipped_queries: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub item_id: String,
    pub label: String,
}

pub fn read_labeled(path: &Path) -> Result<Vec<LabeledItem>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::invalid(format!("{}:{}", path.display(), n + 1), e.to_string()))
        })
        .collect()
}

/// Gold relation labels of a split, keyed `source>target`.
pub fn relation_gold(bundle: &Bundle) -> Vec<LabeledItem> {
    bundle
        .relations
        .iter()
        .map(|r| LabeledItem {
            item_id: format!("{}>{}", r.source_claim_id, r.target_claim_id),
            label: r.relation.as_str().into(),
        })
        .collect()
}

pub fn relation_labels() -> Vec<String> {
    Relation::ALL.iter().map(|r| r.as_str().to_string()).collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 over the closed `labels` set, and their
/// unweighted mean. Gold items with no prediction count as misses.
pub fn macro_f1(predictions: &[LabeledItem], gold: &[LabeledItem], labels: &[String]) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::invalid("labels", "empty label set"));
    }
    let mut violations = Vec::new();
    let mut gold_of: BTreeMap<&str, &str> = BTreeMap::new();
    for g in gold {
        if !labels.contains(&g.label) {
            violations.push(Violation::new(format!("gold.{}", g.item_id), format!("unknown label {:?}", g.label)));
        }
        if gold_of.insert(&g.item_id, &g.label).is_some() {
            violations.push(Violation::new(format!("gold.{}", g.item_id), "duplicate item"));
        }
    }
    let mut pred_of: BTreeMap<&str, &str> = BTreeMap::new();
    for p in predictions {
        if !gold_of.contains_key(p.item_id.as_str()) {
            violations.push(Violation::new(format!("predictions.{}", p.item_id), "prediction for unknown item"));
        }
        if !labels.contains(&p.label) {
            violations.push(Violation::new(format!("predictions.{}", p.item_id), format!("unknown label {:?}", p.label)));
        }
        if pred_of.insert(&p.item_id, &p.label).is_some() {
            violations.push(Violation::new(format!("predictions.{}", p.item_id), "duplicate item"));
        }
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    if gold.is_empty() {
        return Err(Error::invalid("gold", "no gold items"));
    }
    let per_class: Vec<ClassScores> = labels
        .iter()
        .map(|label| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (item, g) in &gold_of {
                let p = pred_of.get(item).copied();
                match (p == Some(label.as_str()), *g == label.as_str()) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { label: label.clone(), precision, recall, f1, support: tp + fn_ }
        })
        .collect();
    let macro_score = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        task: "f1".into(),
        k: None,
        map_at_k: None,
        denominator_rule: None,
        per_class,
        macro_f1: Some(macro_score),
        query_count: 0,
        item_count: gold.len(),
        skipped_queries: 0,
    })
}
