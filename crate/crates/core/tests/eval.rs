mod support;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthset::eval::{
    average_precision_at_k, macro_f1, map_at_k, relation_labels, Candidate, EvalQuery, LabeledItem, Qrels, Ranking,
};

use support::naive_ap;

#[derive(Debug, Clone)]
struct Case {
    qrels: Qrels,
    scores: BTreeMap<String, Vec<(String, f64)>>,
    k: usize,
}

fn case() -> impl Strategy<Value = Case> {
    (any::<u64>(), 1usize..25, 1usize..6, 1usize..30).prop_map(|(seed, n_cand, n_query, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let candidates: Vec<Candidate> = (0..n_cand).map(|i| Candidate { cand_id: format!("c{i}"), text: format!("c {i}") }).collect();
        let queries: Vec<EvalQuery> = (0..n_query).map(|i| EvalQuery { query_id: format!("q{i}"), text: format!("q {i}") }).collect();
        let mut relevance = BTreeSet::new();
        for q in &queries {
            for c in &candidates {
                if rng.random_bool(0.3) {
                    relevance.insert((q.query_id.clone(), c.cand_id.clone()));
                }
            }
        }
        relevance.insert(("q0".to_string(), "c0".to_string()));
        let mut scores = BTreeMap::new();
        for q in &queries {
            let list: Vec<(String, f64)> = candidates.iter().map(|c| (c.cand_id.clone(), rng.random_range(0..8) as f64)).collect();
            scores.insert(q.query_id.clone(), list);
        }
        Case { qrels: Qrels { queries, candidates, relevance }, scores, k }
    })
}

fn map(c: &Case) -> f64 {
    map_at_k(&Ranking::from_scores(c.scores.clone()), &c.qrels, c.k).unwrap().map_at_k.unwrap()
}

proptest! {
    #[test]
    fn map_is_bounded(c in case()) {
        let m = map(&c);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn perfect_iff_relevant_first(ranked in proptest::collection::vec(0u8..12, 0..15), rel in proptest::collection::btree_set(0u8..12, 1..6), k in 1usize..15) {
        let mut seen = BTreeSet::new();
        let ranked: Vec<String> = ranked.into_iter().filter(|x| seen.insert(*x)).map(|x| x.to_string()).collect();
        let rel: BTreeSet<String> = rel.into_iter().map(|x| x.to_string()).collect();
        let ap = average_precision_at_k(&ranked, &rel, k);
        let need = rel.len().min(k);
        let perfect = ranked.len() >= need && ranked[..need].iter().all(|x| rel.contains(x));
        prop_assert_eq!(ap == 1.0, perfect);
        prop_assert!((ap - naive_ap(&ranked, &rel, k)).abs() < 1e-12);
    }

    #[test]
    fn renaming_ids_changes_nothing(c in case()) {
        let rename = |s: &str| format!("renamed-{}", s.chars().rev().collect::<String>());
        let qrels = Qrels {
            queries: c.qrels.queries.iter().map(|q| EvalQuery { query_id: rename(&q.query_id), text: q.text.clone() }).collect(),
            candidates: c.qrels.candidates.iter().map(|x| Candidate { cand_id: rename(&x.cand_id), text: x.text.clone() }).collect(),
            relevance: c.qrels.relevance.iter().map(|(q, x)| (rename(q), rename(x))).collect(),
        };
        // keep the original tie order by breaking ties in the scores themselves
        let scores: BTreeMap<String, Vec<(String, f64)>> = c.scores.iter().map(|(q, list)| {
            let mut sorted = list.clone();
            sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            let n = sorted.len() as f64;
            (q.clone(), sorted.into_iter().enumerate().map(|(i, (id, _))| (id, n - i as f64)).collect())
        }).collect();
        let base = Case { qrels: c.qrels.clone(), scores: scores.clone(), k: c.k };
        let renamed_scores = scores.iter().map(|(q, l)| (rename(q), l.iter().map(|(x, s)| (rename(x), *s)).collect())).collect();
        let renamed = Case { qrels, scores: renamed_scores, k: c.k };
        prop_assert!((map(&base) - map(&renamed)).abs() < 1e-12);
    }

    #[test]
    fn query_order_is_irrelevant(c in case(), seed in any::<u64>()) {
        let mut shuffled = c.clone();
        shuffled.qrels.queries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((map(&c) - map(&shuffled)).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_is_bounded(labels in proptest::collection::vec((any::<bool>(), proptest::option::of(any::<bool>())), 1..40)) {
        let name = |b: bool| if b { "Support" } else { "Undermine" }.to_string();
        let gold: Vec<LabeledItem> = labels.iter().enumerate().map(|(i, (g, _))| LabeledItem { item_id: i.to_string(), label: name(*g) }).collect();
        let pred: Vec<LabeledItem> = labels.iter().enumerate().filter_map(|(i, (_, p))| p.map(|p| LabeledItem { item_id: i.to_string(), label: name(p) })).collect();
        let r = macro_f1(&pred, &gold, &relation_labels()).unwrap();
        let m = r.macro_f1.unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let mean = r.per_class.iter().map(|c| c.f1).sum::<f64>() / r.per_class.len() as f64;
        prop_assert!((m - mean).abs() < 1e-15);
    }
}

#[test]
fn ranking_matches_brute_force_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let list: Vec<(String, f64)> = (0..20).map(|i| (format!("c{i:02}"), rng.random_range(0..5) as f64 * 0.25)).collect();
        let ranking = Ranking::from_scores([("q".to_string(), list.clone())].into());
        // selection sort: repeatedly take the best remaining by (score desc, id asc)
        let mut left = list;
        let mut want = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for i in 1..left.len() {
                let (a, b) = (&left[i], &left[best]);
                if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                    best = i;
                }
            }
            want.push(left.remove(best).0);
        }
        assert_eq!(ranking.ids("q"), want);
    }
}

#[test]
fn two_query_mean() {
    let qrels = Qrels::parse_tsv("q\tq1\tfirst\nq\tq2\tsecond\nc\ta\tA\nc\tb\tB\nc\tc\tC\nc\td\tD\nc\te\tE\nr\tq1\ta\nr\tq2\tb\nr\tq2\te\n").unwrap();
    let ranking = Ranking::parse_jsonl(
        &[("q1", "a", 5.0), ("q1", "b", 4.0), ("q2", "a", 5.0), ("q2", "b", 4.0), ("q2", "c", 3.0), ("q2", "d", 2.0), ("q2", "e", 1.0)]
            .iter()
            .map(|(q, c, s)| serde_json::json!({"query_id": q, "cand_id": c, "score": s}).to_string() + "\n")
            .collect::<String>(),
    )
    .unwrap();
    let r = map_at_k(&ranking, &qrels, 20).unwrap();
    assert_eq!(r.map_at_k, Some(0.725));
    assert_eq!(r.query_count, 2);
}

#[test]
fn queries_without_relevant_are_skipped() {
    let qrels = Qrels::parse_tsv("q\tq1\tx\nq\tq2\ty\nc\ta\tA\nr\tq1\ta\n").unwrap();
    let ranking = Ranking::from_scores([("q1".to_string(), vec![("a".to_string(), 1.0)])].into());
    let r = map_at_k(&ranking, &qrels, 20).unwrap();
    assert_eq!((r.map_at_k, r.skipped_queries), (Some(1.0), 1));
    let none = Qrels::parse_tsv("q\tq1\tx\nc\ta\tA\n").unwrap();
    assert!(map_at_k(&ranking, &none, 20).is_err());
    assert!(map_at_k(&ranking, &qrels, 0).is_err());
}

#[test]
fn qrels_formats_round_trip() {
    let tsv = "q\tq1\tis the backlog real\nc\tc1\twaiting twelve years\nc\tc2\tunrelated\nr\tq1\tc1\n";
    let a = Qrels::parse_tsv(tsv).unwrap();
    let b = Qrels::parse_jsonl(&a.to_jsonl()).unwrap();
    assert_eq!(a, b);
    let r = Ranking::from_scores([("q1".to_string(), vec![("c2".to_string(), 0.5), ("c1".to_string(), 0.9)])].into());
    assert_eq!(Ranking::parse_jsonl(&r.to_jsonl()).unwrap(), r);
}

#[test]
fn f1_rejects_unknowns() {
    let gold = vec![LabeledItem { item_id: "1".into(), label: "Support".into() }];
    let stranger = vec![LabeledItem { item_id: "2".into(), label: "Support".into() }];
    assert!(macro_f1(&stranger, &gold, &relation_labels()).is_err());
    let neutral = vec![LabeledItem { item_id: "1".into(), label: "Neutral".into() }];
    assert!(macro_f1(&neutral, &gold, &relation_labels()).is_err());
    let missing = macro_f1(&[], &gold, &relation_labels()).unwrap();
    assert_eq!(missing.macro_f1, Some(0.0));
}
