//! LLM annotation of posts: post-claim, post-topic and claim-claim relation tuples.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{JobKind, LlmClient, LlmResponse, Payload, PromptInputs};
use crate::model::{ClaimTuple, Post, Relation, RelationTuple, TopicTuple, GENERATED_POST_ID};
use crate::text::{fold_key, normalize_text};

pub const DEFAULT_MAX_CLAIM_CHARS: usize = 400;
pub const DEFAULT_MAX_FAILURE_RATE: f64 = 0.5;

/// Counters for one annotation job.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobReport {
    pub processed: usize,
    /// Provider failures after retries.
    pub failed: usize,
    /// Completions that did not parse after repair.
    pub unparsed: usize,
    /// Topic labels outside the candidate list.
    pub rejected_labels: usize,
    /// Generated targets equal to their source.
    pub self_relations: usize,
    /// Steered relation calls that came back with the other label.
    pub label_mismatches: usize,
    /// Claims cut at a sentence boundary, by claim id.
    pub truncated: Vec<String>,
}

impl JobReport {
    fn failure_rate(&self) -> f64 {
        if self.processed == 0 {
            0.0
        } else {
            (self.failed + self.unparsed) as f64 / self.processed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimOutcome {
    pub claims: Vec<ClaimTuple>,
    pub report: JobReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicOutcome {
    pub topics: Vec<TopicTuple>,
    pub report: JobReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationOutcome {
    pub relations: Vec<RelationTuple>,
    /// Target claims, registered under the `generated` post id.
    pub targets: Vec<ClaimTuple>,
    pub report: JobReport,
}

/// Cuts `text` to at most `max_chars` characters, preferring the last
/// sentence end, then the last word boundary. Returns whether it was cut.
pub fn truncate_claim(text: &str, max_chars: usize) -> (String, bool) {
    if text.chars().count() <= max_chars {
        return (text.to_string(), false);
    }
    let prefix: String = text.chars().take(max_chars).collect();
    let cut = prefix
        .char_indices()
        .filter(|&(i, c)| i > 0 && matches!(c, '.' | '!' | '?'))
        .map(|(i, c)| i + c.len_utf8())
        .last()
        .or_else(|| prefix.rfind(' ').filter(|&i| i > 0))
        .unwrap_or(prefix.len());
    (prefix[..cut].trim().to_string(), true)
}

#[derive(Clone)]
pub struct Annotator {
    pub llm: LlmClient,
    pub max_claim_chars: usize,
    /// Abort a job when more than this fraction of its calls fail.
    pub max_failure_rate: f64,
    pub max_in_flight: usize,
}

impl Annotator {
    pub fn new(llm: LlmClient) -> Self {
        Self {
            llm,
            max_claim_chars: DEFAULT_MAX_CLAIM_CHARS,
            max_failure_rate: DEFAULT_MAX_FAILURE_RATE,
            max_in_flight: 8,
        }
    }

    /// Runs one call per input, at most `max_in_flight` at a time, keeping
    /// input order in the output.
    fn run_all<T: Sync>(
        &self,
        items: &[T],
        job: impl Fn(&T) -> Result<LlmResponse> + Sync + Send,
    ) -> Result<Vec<Result<LlmResponse>>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.max_in_flight.max(1))
            .build()
            .map_err(|e| Error::stage("annotate", e.to_string()))?;
        Ok(pool.install(|| {
            use rayon::prelude::*;
            items.par_iter().map(&job).collect()
        }))
    }

    fn check_failure_rate(&self, job: &str, report: &JobReport) -> Result<()> {
        if report.failure_rate() > self.max_failure_rate {
            return Err(Error::stage(
                "annotate",
                format!(
                    "{job}: {} of {} calls failed (limit {:.0}%)",
                    report.failed + report.unparsed,
                    report.processed,
                    self.max_failure_rate * 100.0
                ),
            ));
        }
        Ok(())
    }

    fn clean_claim(&self, text: &str, report: &mut JobReport, post_id: &str) -> Result<Option<ClaimTuple>> {
        let text = normalize_text(text);
        if text.is_empty() {
            return Ok(None);
        }
        let (text, cut) = truncate_claim(&text, self.max_claim_chars);
        let claim = ClaimTuple::new(post_id, &text)?;
        if cut {
            report.truncated.push(claim.claim_id.clone());
        }
        Ok(Some(claim))
    }

    /// Extracts zero or more claims from each post, one call per post.
    pub fn extract_claims(&self, posts: &[Post]) -> Result<ClaimOutcome> {
        if posts.is_empty() {
            return Err(Error::invalid("posts", "no posts to annotate"));
        }
        let responses = self.run_all(posts, |p| {
            self.llm.run(JobKind::ClaimExtract, PromptInputs::claim_extract(&p.text))
        })?;
        let mut report = JobReport::default();
        let mut claims = BTreeSet::new();
        for (post, resp) in posts.iter().zip(responses) {
            report.processed += 1;
            match resp {
                Err(Error::Validation(v)) => return Err(Error::Validation(v)),
                Err(_) => report.failed += 1,
                Ok(LlmResponse { payload: Some(Payload::Claims(list)), .. }) => {
                    for text in list {
                        if let Some(c) = self.clean_claim(&text, &mut report, &post.post_id)? {
                            claims.insert(c);
                        }
                    }
                }
                Ok(_) => report.unparsed += 1,
            }
        }
        self.check_failure_rate("claim extraction", &report)?;
        report.truncated.sort();
        report.truncated.dedup();
        Ok(ClaimOutcome {
            claims: claims.into_iter().collect(),
            report,
        })
    }

    /// Labels each post with topics.
    ///
    /// With candidates, labels are matched case-insensitively and emitted in
    /// the candidate's spelling; others are kept only when `allow_free_form`.
    /// With no candidates, labels are free-form and lowercased.
    pub fn label_topics(
        &self,
        posts: &[Post],
        candidates: &[String],
        allow_free_form: bool,
    ) -> Result<TopicOutcome> {
        if posts.is_empty() {
            return Err(Error::invalid("posts", "no posts to annotate"));
        }
        let candidates: Vec<String> = candidates
            .iter()
            .map(|c| normalize_text(c))
            .filter(|c| !c.is_empty())
            .collect();
        let canonical: HashMap<String, &str> =
            candidates.iter().map(|c| (fold_key(c), c.as_str())).collect();
        let responses = self.run_all(posts, |p| {
            self.llm.run(
                JobKind::TopicLabel,
                PromptInputs::topic_label(&p.text, &candidates, allow_free_form),
            )
        })?;
        let mut report = JobReport::default();
        let mut topics = BTreeSet::new();
        for (post, resp) in posts.iter().zip(responses) {
            report.processed += 1;
            let labels = match resp {
                Err(Error::Validation(v)) => return Err(Error::Validation(v)),
                Err(_) => {
                    report.failed += 1;
                    continue;
                }
                Ok(LlmResponse { payload: Some(Payload::Topics(list)), .. }) => list,
                Ok(_) => {
                    report.unparsed += 1;
                    continue;
                }
            };
            for label in labels {
                let key = fold_key(&label);
                if key.is_empty() {
                    continue;
                }
                let topic_label = match canonical.get(&key) {
                    Some(c) => c.to_string(),
                    None if candidates.is_empty() || allow_free_form => key,
                    None => {
                        report.rejected_labels += 1;
                        continue;
                    }
                };
                topics.insert(TopicTuple {
                    post_id: post.post_id.clone(),
                    topic_label,
                });
            }
        }
        self.check_failure_rate("topic labeling", &report)?;
        Ok(TopicOutcome {
            topics: topics.into_iter().collect(),
            report,
        })
    }

    /// Two steered calls per source claim, one asking for a supporting target
    /// and one for an undermining target. Targets are not expanded further.
    pub fn generate_relations(&self, claims: &[ClaimTuple]) -> Result<RelationOutcome> {
        if claims.is_empty() {
            return Err(Error::invalid("claims", "no claims to relate"));
        }
        let jobs: Vec<(&ClaimTuple, Relation)> = claims
            .iter()
            .flat_map(|c| Relation::ALL.into_iter().map(move |r| (c, r)))
            .collect();
        let responses = self.run_all(&jobs, |(claim, want)| {
            self.llm.run(
                JobKind::RelationGen,
                PromptInputs::relation_gen(&claim.claim_text, *want),
            )
        })?;
        let mut report = JobReport::default();
        let mut relations = BTreeSet::new();
        let mut targets = BTreeMap::new();
        for ((source, want), resp) in jobs.iter().zip(responses) {
            report.processed += 1;
            let (target, relation) = match resp {
                Err(Error::Validation(v)) => return Err(Error::Validation(v)),
                Err(_) => {
                    report.failed += 1;
                    continue;
                }
                Ok(LlmResponse {
                    payload: Some(Payload::Relation { target, relation }),
                    ..
                }) => (target, relation),
                Ok(_) => {
                    report.unparsed += 1;
                    continue;
                }
            };
            if relation != *want {
                report.label_mismatches += 1;
                continue;
            }
            let Some(target) = self.clean_claim(&target, &mut report, GENERATED_POST_ID)? else {
                report.unparsed += 1;
                continue;
            };
            if target.claim_text == normalize_text(&source.claim_text) {
                report.self_relations += 1;
                continue;
            }
            relations.insert(RelationTuple {
                source_claim_id: source.claim_id.clone(),
                target_claim_id: target.claim_id.clone(),
                relation,
            });
            targets.insert(target.claim_id.clone(), target);
        }
        self.check_failure_rate("relation generation", &report)?;
        report.truncated.sort();
        report.truncated.dedup();
        Ok(RelationOutcome {
            relations: relations.into_iter().collect(),
            targets: targets.into_values().collect(),
            report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_claims_are_untouched() {
        assert_eq!(truncate_claim("A causes B.", 400), ("A causes B.".to_string(), false));
    }

    #[test]
    fn truncation_prefers_sentence_boundary() {
        let text = format!("{} Second sentence keeps going", "First sentence ends here.");
        let (cut, flagged) = truncate_claim(&text, 35);
        assert!(flagged);
        assert_eq!(cut, "First sentence ends here.");
    }

    #[test]
    fn truncation_falls_back_to_word_boundary() {
        let (cut, flagged) = truncate_claim("one two three four five", 12);
        assert!(flagged);
        assert_eq!(cut, "one two");
        let (cut, _) = truncate_claim("abcdefghij", 4);
        assert_eq!(cut, "abcd");
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let text = "é".repeat(500);
        let (cut, flagged) = truncate_claim(&text, 400);
        assert!(flagged);
        assert_eq!(cut.chars().count(), 400);
    }
}
