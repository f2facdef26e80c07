//! Threshold-graph clustering of claim embeddings.
//!
//! Two claims share a cluster when a chain of pairs with cosine similarity
//! strictly above `tau` connects them. Clusters are the connected components
//! of that graph, so members of one cluster can be less than `tau` similar to
//! each other directly. Each cluster is represented by its medoid.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::model::{ClusterAssignment, EmbeddingVector, Relation, RelationTuple};

pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentativeRule {
    /// Member with the largest summed similarity to the rest of its cluster.
    #[default]
    Medoid,
}

impl RepresentativeRule {
    pub fn as_str(self) -> &'static str {
        match self {
            RepresentativeRule::Medoid => "medoid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub tau: f64,
    pub representative: RepresentativeRule,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            representative: RepresentativeRule::Medoid,
        }
    }
}

impl ClusterConfig {
    pub fn violations(&self) -> Vec<Violation> {
        if self.tau > 0.0 && self.tau <= 1.0 {
            Vec::new()
        } else {
            vec![Violation::new("tau", "tau out of (0,1]")]
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // the smaller index becomes the root, so roots are component minima
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Cluster label for every embedding. Labels are dense and numbered in order
/// of each cluster's smallest member index.
pub fn cluster(embeddings: &[EmbeddingVector], tau: f64) -> Result<Vec<usize>> {
    let bad = ClusterConfig { tau, ..ClusterConfig::default() }.violations();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    let Some(first) = embeddings.first() else {
        return Err(Error::invalid("embeddings", "nothing to cluster"));
    };
    let dim = first.dim();
    let mismatched: Vec<Violation> = embeddings
        .iter()
        .enumerate()
        .filter(|(_, e)| e.dim() != dim)
        .map(|(i, e)| Violation::new(format!("embeddings[{i}]"), format!("dimension {} differs from {dim}", e.dim())))
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Validation(mismatched));
    }

    let edges: Vec<(usize, usize)> = (0..embeddings.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let row = &embeddings[i];
            embeddings[i + 1..]
                .iter()
                .enumerate()
                .filter(move |(_, other)| row.cosine(other) > tau)
                .map(move |(j, _)| (i, i + 1 + j))
        })
        .collect();

    let mut uf = UnionFind::new(embeddings.len());
    for (a, b) in edges {
        uf.union(a, b);
    }
    let mut label_of_root = BTreeMap::new();
    Ok((0..embeddings.len())
        .map(|i| {
            let root = uf.find(i);
            let next = label_of_root.len();
            *label_of_root.entry(root).or_insert(next)
        })
        .collect())
}

/// Medoid of a cluster; ties go to the lexicographically smallest claim id.
pub fn pick_representative(members: &[(&str, &EmbeddingVector)]) -> String {
    let mut sorted: Vec<&(&str, &EmbeddingVector)> = members.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut best: Option<(f64, &str)> = None;
    for (i, (id, v)) in sorted.iter().enumerate() {
        // summed in claim-id order so the result does not depend on input order
        let score: f64 = sorted
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (_, w))| v.cosine(w))
            .sum();
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, id));
        }
    }
    best.map(|(_, id)| id.to_string()).unwrap_or_default()
}

/// Clusters claims and picks a representative for each cluster.
///
/// Claims are ordered by id before clustering, so cluster ids do not depend
/// on input order.
pub fn cluster_claims(
    claim_ids: &[String],
    embeddings: &[EmbeddingVector],
    cfg: &ClusterConfig,
) -> Result<ClusterAssignment> {
    if claim_ids.len() != embeddings.len() {
        return Err(Error::invalid(
            "embeddings",
            format!("{} claims but {} embeddings", claim_ids.len(), embeddings.len()),
        ));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = claim_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::invalid("claim_ids", format!("duplicate claim id {dup}")));
    }
    let mut order: Vec<usize> = (0..claim_ids.len()).collect();
    order.sort_by(|&a, &b| claim_ids[a].cmp(&claim_ids[b]));
    let sorted: Vec<EmbeddingVector> = order.iter().map(|&i| embeddings[i].clone()).collect();
    let labels = cluster(&sorted, cfg.tau)?;

    let count = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<(&str, &EmbeddingVector)>> = vec![Vec::new(); count];
    let mut assignment = ClusterAssignment::default();
    for (pos, &label) in labels.iter().enumerate() {
        let id = claim_ids[order[pos]].as_str();
        members[label].push((id, &sorted[pos]));
        assignment.cluster_of.insert(id.to_string(), label);
    }
    assignment.representatives = members
        .iter()
        .map(|m| match cfg.representative {
            RepresentativeRule::Medoid => pick_representative(m),
        })
        .collect();
    Ok(assignment)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub relations: Vec<RelationTuple>,
    pub self_relations: usize,
    pub duplicates: usize,
    /// Representative pairs that ended up carrying both labels.
    pub conflicts: usize,
}

/// Points each relation at its endpoints' cluster representatives.
///
/// Relations that collapse onto a single cluster are dropped, exact
/// duplicates are merged, and a pair left with both labels is dropped
/// entirely.
pub fn rewrite_relations(
    relations: &[RelationTuple],
    assignment: &ClusterAssignment,
) -> Result<RewriteOutcome> {
    let mut dangling = Vec::new();
    let mut out = RewriteOutcome::default();
    let mut labels: BTreeMap<(String, String), BTreeSet<Relation>> = BTreeMap::new();
    for r in relations {
        let source = assignment.representative_of(&r.source_claim_id);
        let target = assignment.representative_of(&r.target_claim_id);
        let (Some(source), Some(target)) = (source, target) else {
            for id in [&r.source_claim_id, &r.target_claim_id] {
                if !assignment.cluster_of.contains_key(id) {
                    dangling.push(Violation::new(id.as_str(), "dangling reference"));
                }
            }
            continue;
        };
        if source == target {
            out.self_relations += 1;
            continue;
        }
        if !labels
            .entry((source.to_string(), target.to_string()))
            .or_default()
            .insert(r.relation)
        {
            out.duplicates += 1;
        }
    }
    if !dangling.is_empty() {
        return Err(Error::Validation(dangling));
    }
    for ((source, target), set) in labels {
        if set.len() > 1 {
            out.conflicts += 1;
            continue;
        }
        out.relations.push(RelationTuple {
            source_claim_id: source,
            target_claim_id: target,
            relation: *set.first().expect("nonempty"),
        });
    }
    Ok(out)
}
