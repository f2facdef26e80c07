use std::collections::BTreeSet;

use proptest::prelude::*;
use synthset::keywords::{enumerate_queries, sample_queries};
use synthset::model::{KeywordSet, QUERY_SEPARATOR};

fn keyword_set() -> impl Strategy<Value = KeywordSet> {
    (1usize..6, 2usize..7).prop_map(|(h, l)| {
        let heavy: Vec<String> = (0..h).map(|i| format!("heavy term {i}")).collect();
        let lesser: Vec<String> = (0..l).map(|i| format!("lesser{i}")).collect();
        KeywordSet::from_groups("topic", heavy, lesser).unwrap()
    })
}

proptest! {
    #[test]
    fn sample_is_a_distinct_subset(ks in keyword_set(), n in 1usize..40, seed in any::<u64>()) {
        let all = enumerate_queries(&ks);
        let plan = sample_queries(&ks, n, seed);
        prop_assert_eq!(plan.queries.len(), n.min(all.len()));
        prop_assert_eq!(plan.truncated, n > all.len());
        let rendered: BTreeSet<&str> = plan.queries.iter().map(|q| q.rendered.as_str()).collect();
        prop_assert_eq!(rendered.len(), plan.queries.len());
        let universe: BTreeSet<&str> = all.iter().map(|q| q.rendered.as_str()).collect();
        prop_assert!(rendered.is_subset(&universe));
        // enumeration order is kept
        let positions: Vec<usize> = plan.queries.iter()
            .map(|q| all.iter().position(|a| a == q).unwrap())
            .collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampling_is_seeded(ks in keyword_set(), n in 1usize..20, seed in any::<u64>()) {
        prop_assert_eq!(sample_queries(&ks, n, seed), sample_queries(&ks, n, seed));
    }

    #[test]
    fn queries_have_one_heavy_and_two_lesser(ks in keyword_set()) {
        for q in enumerate_queries(&ks) {
            prop_assert!(ks.heavy.contains(&q.heavy_term));
            prop_assert!(ks.lesser.contains(&q.lesser_terms[0]));
            prop_assert!(ks.lesser.contains(&q.lesser_terms[1]));
            prop_assert_ne!(&q.lesser_terms[0], &q.lesser_terms[1]);
            prop_assert_eq!(q.rendered.split(QUERY_SEPARATOR).count(), 3);
        }
    }
}

#[test]
fn single_combination() {
    let ks = KeywordSet::from_groups("t", ["h1"], ["l1", "l2"]).unwrap();
    let q = enumerate_queries(&ks);
    assert_eq!(q.len(), 1);
    assert_eq!(q[0].rendered, "h1 AND l1 AND l2");
}

#[test]
fn shared_term_stays_heavy() {
    let ks = KeywordSet::from_groups("t", ["visa", "green card"], ["visa", "wait", "uscis"]).unwrap();
    assert_eq!(ks.heavy, ["visa", "green card"]);
    assert_eq!(ks.lesser, ["wait", "uscis"]);
}

#[test]
fn identical_lists_cannot_be_fixed() {
    assert!(KeywordSet::from_groups("t", ["a", "b"], ["a", "b"]).is_err());
}

#[test]
fn different_seeds_usually_differ() {
    let heavy: Vec<String> = (0..10).map(|i| format!("h{i}")).collect();
    let lesser: Vec<String> = (0..20).map(|i| format!("l{i}")).collect();
    let ks = KeywordSet::from_groups("t", heavy, lesser).unwrap();
    let plans: BTreeSet<Vec<String>> = (0..10)
        .map(|s| sample_queries(&ks, 25, s).queries.into_iter().map(|q| q.rendered).collect())
        .collect();
    assert!(plans.len() > 1);
}
