mod support;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthset::cluster::{cluster, cluster_claims, pick_representative, rewrite_relations, ClusterConfig};
use synthset::model::{ClusterAssignment, EmbeddingVector, Relation, RelationTuple};

use support::{blocks, clustered_vectors, components_oracle, unit};

fn instance() -> impl Strategy<Value = Vec<EmbeddingVector>> {
    (any::<u64>(), 1usize..=50).prop_map(|(seed, n)| clustered_vectors(&mut ChaCha8Rng::seed_from_u64(seed), n, 8))
}

fn cfg(tau: f64) -> ClusterConfig {
    ClusterConfig { tau, ..ClusterConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equals_connected_components(v in instance(), tau in 0.05f64..1.0) {
        prop_assert_eq!(cluster(&v, tau).unwrap(), components_oracle(&v, tau));
    }

    #[test]
    fn higher_threshold_refines(v in instance(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let coarse = blocks(&cluster(&v, lo).unwrap());
        for block in blocks(&cluster(&v, hi).unwrap()) {
            prop_assert!(coarse.iter().any(|c| block.is_subset(c)));
        }
    }

    #[test]
    fn shuffling_changes_nothing(v in instance(), tau in 0.3f64..1.0, seed in any::<u64>()) {
        let ids: Vec<String> = (0..v.len()).map(|i| format!("c{i:03}")).collect();
        let base = cluster_claims(&ids, &v, &cfg(tau)).unwrap();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ids2: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        let v2: Vec<EmbeddingVector> = order.iter().map(|&i| v[i].clone()).collect();
        prop_assert_eq!(cluster_claims(&ids2, &v2, &cfg(tau)).unwrap(), base.clone());
        prop_assert!(base.violations().is_empty());
    }

    #[test]
    fn representative_is_brute_force_medoid(v in instance()) {
        let ids: Vec<String> = (0..v.len()).map(|i| format!("c{i:03}")).collect();
        let members: Vec<(&str, &EmbeddingVector)> = ids.iter().map(|s| s.as_str()).zip(&v).collect();
        let score = |i: usize| -> f64 {
            (0..v.len()).filter(|&j| j != i).map(|j| v[i].values().iter().zip(v[j].values()).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let best = (0..v.len()).map(score).fold(f64::MIN, f64::max);
        let got = pick_representative(&members);
        let i = ids.iter().position(|s| *s == got).unwrap();
        prop_assert!(score(i) >= best - 1e-9);
    }
}

#[test]
fn transitive_chain_is_one_cluster() {
    let c2 = (0.96 - 0.96 * 0.9) / 0.28;
    let c3 = (1.0f64 - 0.81 - c2 * c2).sqrt();
    let v = vec![unit(vec![1.0, 0.0, 0.0]), unit(vec![0.96, 0.28, 0.0]), unit(vec![0.9, c2, c3])];
    assert!((v[0].cosine(&v[2]) - 0.9).abs() < 1e-9);
    assert_eq!(cluster(&v, 0.95).unwrap(), vec![0, 0, 0]);
    assert_eq!(cluster(&v, 0.97).unwrap(), vec![0, 1, 2]);
}

#[test]
fn medoid_of_three_collinear() {
    let a = unit(vec![1.0, 0.0]);
    let b = unit(vec![0.2f64.cos(), 0.2f64.sin()]);
    let c = unit(vec![0.4f64.cos(), 0.4f64.sin()]);
    assert_eq!(pick_representative(&[("z", &a), ("m", &b), ("a", &c)]), "m");
    assert_eq!(pick_representative(&[("only", &a)]), "only");
    assert_eq!(pick_representative(&[("y", &a), ("x", &c)]), "x");
}

#[test]
fn rejects_bad_input() {
    let v = vec![unit(vec![1.0, 0.0]), unit(vec![1.0, 0.0, 0.0])];
    assert!(cluster(&v, 0.5).is_err());
    assert!(cluster(&v[..1], 0.0).is_err());
    assert!(cluster(&v[..1], 1.5).is_err());
    assert!(cluster(&[], 0.5).is_err());
}

fn rel(s: &str, t: &str, r: Relation) -> RelationTuple {
    RelationTuple { source_claim_id: s.into(), target_claim_id: t.into(), relation: r }
}

fn assignment(groups: &[&[&str]]) -> ClusterAssignment {
    let mut a = ClusterAssignment::default();
    for (i, g) in groups.iter().enumerate() {
        for id in *g {
            a.cluster_of.insert(id.to_string(), i);
        }
        a.representatives.push(g[0].to_string());
    }
    a
}

#[test]
fn rewrite_identity_on_singletons() {
    let rels = vec![rel("a", "b", Relation::Support), rel("b", "c", Relation::Undermine)];
    let out = rewrite_relations(&rels, &assignment(&[&["a"], &["b"], &["c"]])).unwrap();
    assert_eq!(out.relations, rels);
}

#[test]
fn rewrite_drops_merged_and_conflicting() {
    let rels = vec![
        rel("a", "a2", Relation::Support),
        rel("a", "b", Relation::Support),
        rel("a2", "b2", Relation::Undermine),
        rel("c", "b", Relation::Support),
        rel("c", "b2", Relation::Support),
    ];
    let out = rewrite_relations(&rels, &assignment(&[&["a", "a2"], &["b", "b2"], &["c"]])).unwrap();
    assert_eq!(out.self_relations, 1);
    assert_eq!(out.conflicts, 1);
    assert_eq!(out.duplicates, 1);
    assert_eq!(out.relations, vec![rel("c", "b", Relation::Support)]);
    let counted: BTreeMap<&str, usize> = [("self", out.self_relations), ("dup", out.duplicates), ("conflict", out.conflicts)].into();
    assert_eq!(counted.values().sum::<usize>(), 3);
}

#[test]
fn rewrite_rejects_dangling() {
    let err = rewrite_relations(&[rel("a", "ghost", Relation::Support)], &assignment(&[&["a"]])).unwrap_err();
    assert!(err.to_string().contains("ghost"));
}

#[test]
fn partition_covers_every_claim() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = clustered_vectors(&mut rng, 40, 8);
    let ids: Vec<String> = (0..40).map(|i| format!("c{i}")).collect();
    let a = cluster_claims(&ids, &v, &cfg(0.9)).unwrap();
    let covered: BTreeSet<String> = a.members().into_iter().flatten().collect();
    assert_eq!(covered.len(), 40);
}
