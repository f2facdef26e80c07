use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::DateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use synthset::annotate::Annotator;
use synthset::clock::ManualClock;
use synthset::error::ProviderError;
use synthset::llm::{JobKind, LlmClient, LlmProvider, LlmRequest};
use synthset::model::{claim_id_of, ClaimTuple, Post, Relation, GENERATED_POST_ID};
use synthset::text::normalize_text;

/// Answers looked up by (job, primary input, steered label).
#[derive(Default)]
struct Table {
    answers: HashMap<(JobKind, String, String), Result<String, ProviderError>>,
}

impl Table {
    fn set(&mut self, kind: JobKind, input: &str, label: &str, answer: Result<String, ProviderError>) {
        self.answers.insert((kind, input.to_string(), label.to_string()), answer);
    }
}

impl LlmProvider for Table {
    fn name(&self) -> &str {
        "table"
    }
    fn model(&self) -> &str {
        "table"
    }
    fn call(&self, req: &LlmRequest) -> Result<String, ProviderError> {
        let input = req.inputs.get("post").or(req.inputs.get("claim")).unwrap_or_default();
        let label = req.inputs.get("label").unwrap_or_default();
        self.answers
            .get(&(req.kind, input.to_string(), label.to_string()))
            .cloned()
            .unwrap_or_else(|| Err(ProviderError::fatal("no answer")))
    }
}

fn annotator(table: Table) -> Annotator {
    Annotator::new(LlmClient::new(Arc::new(table), Arc::new(ManualClock::epoch())))
}

fn post(id: &str, text: &str) -> Post {
    Post {
        post_id: id.into(),
        source_id: "s".into(),
        text: text.into(),
        url: None,
        fetched_at: DateTime::UNIX_EPOCH,
        query_ref: "a AND b AND c".into(),
        topic_id: "t".into(),
    }
}

#[test]
fn claims_equal_direct_fixture_join() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut table = Table::default();
    let posts: Vec<Post> = (0..100).map(|i| post(&format!("p{i}"), &format!("post body number {i}"))).collect();
    let mut expected: Vec<ClaimTuple> = Vec::new();
    let mut failures = 0;
    for p in &posts {
        let answer = match rng.random_range(0..10) {
            0 => {
                failures += 1;
                Err(ProviderError::fatal("down"))
            }
            1 => {
                failures += 1;
                Ok("I cannot help with that".to_string())
            }
            _ => {
                let claims: Vec<String> = (0..rng.random_range(0..4))
                    .map(|j| format!("  Claim {j}   made in {} ", p.post_id))
                    .collect();
                for c in &claims {
                    let text = normalize_text(c);
                    expected.push(ClaimTuple { claim_id: claim_id_of(&p.post_id, &text).unwrap(), post_id: p.post_id.clone(), claim_text: text });
                }
                Ok(json!({ "claims": claims }).to_string())
            }
        };
        table.set(JobKind::ClaimExtract, &p.text, "", answer);
    }
    let out = annotator(table).extract_claims(&posts).unwrap();
    expected.sort();
    assert_eq!(out.claims, expected);
    assert_eq!(out.report.processed, 100);
    assert_eq!(out.report.failed + out.report.unparsed, failures);
}

#[test]
fn too_many_failures_abort() {
    let posts: Vec<Post> = (0..4).map(|i| post(&format!("p{i}"), &format!("body {i}"))).collect();
    let mut table = Table::default();
    table.set(JobKind::ClaimExtract, &posts[0].text, "", Ok(r#"{"claims": ["fine"]}"#.into()));
    let err = annotator(table).extract_claims(&posts).unwrap_err();
    assert!(err.to_string().contains("3 of 4"), "{err}");
}

#[test]
fn empty_claim_list_still_counts() {
    let posts = vec![post("p1", "nothing to see")];
    let mut table = Table::default();
    table.set(JobKind::ClaimExtract, "nothing to see", "", Ok(r#"{"claims": []}"#.into()));
    let out = annotator(table).extract_claims(&posts).unwrap();
    assert!(out.claims.is_empty());
    assert_eq!(out.report.processed, 1);
}

#[test]
fn candidate_labels() {
    let posts = vec![post("p1", "waiting twelve years for priority dates"), post("p2", "cheap goods taken from shops")];
    let mut table = Table::default();
    table.set(JobKind::TopicLabel, &posts[0].text, "", Ok(r#"{"topics": ["Green Card Backlog"]}"#.into()));
    table.set(JobKind::TopicLabel, &posts[1].text, "", Ok(r#"{"topics": ["shoplifting"]}"#.into()));
    let candidates = vec!["green card backlog".to_string(), "zero-dollar shopping".to_string()];
    let out = annotator(table).label_topics(&posts, &candidates, false).unwrap();
    assert_eq!(out.topics.len(), 1);
    assert_eq!(out.topics[0].post_id, "p1");
    assert_eq!(out.topics[0].topic_label, "green card backlog");
    assert_eq!(out.report.rejected_labels, 1);
}

#[test]
fn free_form_labels() {
    let posts = vec![post("p1", "shots for kids")];
    let mut table = Table::default();
    table.set(JobKind::TopicLabel, "shots for kids", "", Ok(r#"{"topics": ["Vaccines", "vaccines"]}"#.into()));
    let table = Arc::new(table);
    let a = Annotator::new(LlmClient::new(table.clone(), Arc::new(ManualClock::epoch())));
    let out = a.label_topics(&posts, &[], false).unwrap();
    assert_eq!(out.topics.len(), 1);
    assert_eq!(out.topics[0].topic_label, "vaccines");
    let kept = a.label_topics(&posts, &["elections".to_string()], true).unwrap();
    assert_eq!(kept.topics[0].topic_label, "vaccines");
}

#[test]
fn relation_histogram_equals_fixture_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let claims: Vec<ClaimTuple> = (0..50).map(|i| ClaimTuple::new(&format!("p{i}"), &format!("source claim {i}")).unwrap()).collect();
    let mut table = Table::default();
    let mut want: BTreeMap<Relation, usize> = BTreeMap::new();
    for c in &claims {
        for r in Relation::ALL {
            let answer = match rng.random_range(0..8) {
                0 => Err(ProviderError::fatal("down")),
                1 => Ok(json!({"target": "x", "relation": "Neutral"}).to_string()),
                2 => {
                    let other = if r == Relation::Support { Relation::Undermine } else { Relation::Support };
                    Ok(json!({"target": format!("wrong way {}", c.claim_text), "relation": other.as_str()}).to_string())
                }
                3 => Ok(json!({"target": c.claim_text, "relation": r.as_str()}).to_string()),
                _ => {
                    *want.entry(r).or_default() += 1;
                    Ok(json!({"target": format!("{} target for {}", r.as_str(), c.claim_text), "relation": r.as_str()}).to_string())
                }
            };
            table.set(JobKind::RelationGen, &c.claim_text, r.as_str(), answer);
        }
    }
    let out = annotator(table).generate_relations(&claims).unwrap();
    let mut got: BTreeMap<Relation, usize> = BTreeMap::new();
    for r in &out.relations {
        *got.entry(r.relation).or_default() += 1;
    }
    assert_eq!(got, want);
    assert_eq!(out.targets.len(), out.relations.len());
    assert!(out.targets.iter().all(|t| t.post_id == GENERATED_POST_ID));
    let ids: std::collections::HashSet<&str> = claims.iter().chain(&out.targets).map(|c| c.claim_id.as_str()).collect();
    assert!(out.relations.iter().all(|r| ids.contains(r.source_claim_id.as_str()) && ids.contains(r.target_claim_id.as_str())));
    assert!(out.report.self_relations > 0 && out.report.label_mismatches > 0);
}

#[test]
fn one_claim_gets_both_labels() {
    let claims = vec![ClaimTuple::new("p1", "Rent is rising").unwrap()];
    let mut table = Table::default();
    table.set(JobKind::RelationGen, "Rent is rising", "Support", Ok(r#"{"target": "Landlords raised prices", "relation": "Support"}"#.into()));
    table.set(JobKind::RelationGen, "Rent is rising", "Undermine", Ok(r#"{"target": "Rents fell last year", "relation": "Undermine"}"#.into()));
    let out = annotator(table).generate_relations(&claims).unwrap();
    let labels: Vec<Relation> = out.relations.iter().map(|r| r.relation).collect();
    assert_eq!(labels.len(), 2);
    assert!(labels.contains(&Relation::Support) && labels.contains(&Relation::Undermine));
}

#[test]
fn results_ignore_input_order() {
    let posts: Vec<Post> = (0..30).map(|i| post(&format!("p{i}"), &format!("body {i}"))).collect();
    let build = || {
        let mut t = Table::default();
        for (i, p) in posts.iter().enumerate() {
            t.set(JobKind::ClaimExtract, &p.text, "", Ok(json!({"claims": [format!("claim {}", i % 7)]}).to_string()));
            t.set(JobKind::TopicLabel, &p.text, "", Ok(json!({"topics": [format!("topic {}", i % 3)]}).to_string()));
        }
        annotator(t)
    };
    let a = build();
    let base_claims = a.extract_claims(&posts).unwrap().claims;
    let base_topics = a.label_topics(&posts, &[], false).unwrap().topics;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut shuffled = posts.clone();
        shuffled.shuffle(&mut rng);
        let b = build();
        assert_eq!(b.extract_claims(&shuffled).unwrap().claims, base_claims);
        assert_eq!(b.label_topics(&shuffled, &[], false).unwrap().topics, base_topics);
    }
}
