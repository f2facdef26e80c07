//! Keyword groups for a topic and the AND-joined search queries built from them.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::llm::{JobKind, LlmClient, Payload, PromptInputs};
use crate::model::{KeywordSet, Query, Topic};
use crate::text::fold_key;

pub const DEFAULT_HEAVY_N: usize = 10;
pub const DEFAULT_LESSER_N: usize = 20;
pub const DEFAULT_QUERY_COUNT: usize = 25;

/// Prompt rounds allowed when the provider returns too few distinct terms.
pub const DEFAULT_KEYWORD_ROUNDS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub topic_id: String,
    pub requested_count: usize,
    pub seed: u64,
    pub queries: Vec<Query>,
    /// Set when fewer combinations existed than were requested.
    pub truncated: bool,
}

/// Asks the provider for heavy and lesser keyword groups.
///
/// Re-prompts, listing the terms already collected, until both groups reach
/// the requested sizes or `rounds` prompts have been made. Lists are then
/// truncated to size. A set that still has at least one heavy and two lesser
/// terms is accepted even if short.
pub fn generate_keywords(
    topic: &Topic,
    heavy_n: usize,
    lesser_n: usize,
    llm: &LlmClient,
    rounds: u32,
) -> Result<KeywordSet> {
    let mut bad = Vec::new();
    if heavy_n < 1 {
        bad.push(Violation::new("heavy_n", "must be at least 1"));
    }
    if lesser_n < 2 {
        bad.push(Violation::new("lesser_n", "must be at least 2"));
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }

    let mut heavy: Vec<String> = Vec::new();
    let mut lesser: Vec<String> = Vec::new();
    let mut current: Option<KeywordSet> = None;
    let mut invalid: Option<Error> = None;
    let mut last_raw: Option<String> = None;
    let mut last_error: Option<String> = None;

    for _ in 0..rounds.max(1) {
        let exclude: Vec<String> = heavy.iter().chain(&lesser).cloned().collect();
        let inputs = PromptInputs::keywords(
            &topic.title,
            topic.description.as_deref(),
            heavy_n,
            lesser_n,
            &exclude,
        );
        let resp = match llm.run(JobKind::Keywords, inputs) {
            Ok(r) => r,
            Err(e) => {
                if current.is_some() {
                    break;
                }
                return Err(invalid.unwrap_or(e));
            }
        };
        let Some(Payload::Keywords { heavy: h, lesser: l }) = resp.payload else {
            last_error = resp.parse_error.map(|e| e.to_string());
            last_raw = Some(resp.raw);
            continue;
        };
        heavy.extend(h);
        lesser.extend(l);
        match KeywordSet::from_groups(&topic.topic_id, &heavy, &lesser) {
            Ok(mut set) => {
                set.heavy.truncate(heavy_n);
                set.lesser.truncate(lesser_n);
                let grew = current.as_ref().is_none_or(|c| {
                    c.heavy.len() < set.heavy.len() || c.lesser.len() < set.lesser.len()
                });
                let full = set.heavy.len() >= heavy_n && set.lesser.len() >= lesser_n;
                current = Some(set);
                if full || !grew {
                    break;
                }
            }
            Err(e) => invalid = Some(e),
        }
    }

    match (current, invalid) {
        (Some(set), _) => Ok(set),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Stage {
            stage: "keywords".into(),
            message: last_error.unwrap_or_else(|| "provider returned no usable keywords".into()),
            raw: last_raw,
        }),
    }
}

/// Every (heavy term, unordered lesser pair) combination exactly once, in
/// heavy-list order, then lexicographic lesser-pair order.
pub fn enumerate_queries(ks: &KeywordSet) -> Vec<Query> {
    let mut out = Vec::with_capacity(ks.heavy.len() * pair_count(ks.lesser.len()));
    for heavy in &ks.heavy {
        let mut row: Vec<Query> = Vec::new();
        for (i, a) in ks.lesser.iter().enumerate() {
            for b in &ks.lesser[i + 1..] {
                row.push(Query::new(&ks.topic_id, heavy, a, b));
            }
        }
        row.sort_by_cached_key(|q| {
            let [_, a, b] = q.terms();
            (fold_key(a), a.to_string(), fold_key(b), b.to_string())
        });
        out.extend(row);
    }
    out
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Draws `n` distinct queries uniformly without replacement, seeded.
/// Returned queries keep their enumeration order.
pub fn sample_queries(ks: &KeywordSet, n: usize, seed: u64) -> QueryPlan {
    let all = enumerate_queries(ks);
    let truncated = n > all.len();
    let queries = if truncated {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, all.len(), n).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i].clone()).collect()
    };
    QueryPlan {
        topic_id: ks.topic_id.clone(),
        requested_count: n,
        seed,
        queries,
        truncated,
    }
}
