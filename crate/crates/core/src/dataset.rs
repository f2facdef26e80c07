//! Leakage-free train/dev/test splitting, JSONL emission and verification.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::model::{
    validate_json_line, ClaimTuple, ClusterAssignment, DatasetManifest, Post, Record, RecordKind,
    RefIndex, RelationTuple, SplitProportions, TopicTuple, GENERATED_POST_ID,
};
use crate::text::sha256_hex;

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];
pub const MANIFEST_FILE: &str = "manifest.json";

/// Records of one split, in canonical order once [`Bundle::sort`] has run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub posts: Vec<Post>,
    pub claims: Vec<ClaimTuple>,
    pub topics: Vec<TopicTuple>,
    pub relations: Vec<RelationTuple>,
}

impl Bundle {
    pub fn sort(&mut self) {
        self.posts.sort_by(|a, b| a.post_id.cmp(&b.post_id));
        self.claims.sort();
        self.claims.dedup();
        self.topics.sort();
        self.topics.dedup();
        self.relations.sort();
        self.relations.dedup();
    }

    pub fn count(&self, kind: RecordKind) -> usize {
        match kind {
            RecordKind::Post => self.posts.len(),
            RecordKind::Claim => self.claims.len(),
            RecordKind::Topic => self.topics.len(),
            RecordKind::Relation => self.relations.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    /// Clusters per split.
    pub clusters: [usize; 3],
    /// Groups of clusters tied together by a shared source post.
    pub units: usize,
    pub cross_split_relations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub bundles: [Bundle; 3],
    /// Cluster ids per split.
    pub cluster_ids: [BTreeSet<usize>; 3],
    pub report: SplitReport,
}

/// Largest-remainder apportionment of `n` items; ties in the remainder go to
/// the earlier split.
pub fn apportion(n: usize, proportions: &SplitProportions) -> [usize; 3] {
    let p = proportions.as_array();
    let quotas: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
    let mut out = [0usize; 3];
    for (o, q) in out.iter_mut().zip(&quotas) {
        *o = q.floor() as usize;
    }
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Assigns weighted units to splits so per-split weight tracks the
/// largest-remainder targets. Units are shuffled, then placed largest first
/// into the nonzero split furthest below its target. With unit weights this
/// reproduces [`apportion`] exactly.
fn assign_units<T>(units: &[(T, usize)], proportions: &SplitProportions, seed: u64) -> HashMap<T, usize>
where
    T: Clone + Eq + std::hash::Hash,
{
    let p = proportions.as_array();
    let total = units.iter().map(|(_, w)| w).sum();
    let targets = apportion(total, proportions);
    let mut order: Vec<&(T, usize)> = units.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|a, b| b.1.cmp(&a.1));
    let mut filled = [0usize; 3];
    let mut out = HashMap::new();
    for (unit, weight) in order {
        let split = (0..3)
            .filter(|&i| p[i] > 0.0)
            .max_by(|&a, &b| {
                let da = targets[a] as i64 - filled[a] as i64;
                let db = targets[b] as i64 - filled[b] as i64;
                da.cmp(&db).then(b.cmp(&a))
            })
            .expect("some proportion is positive");
        filled[split] += weight;
        out.insert(unit.clone(), split);
    }
    out
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
    }
}

/// Splits by cluster so no cluster, claim or post lands in two splits.
///
/// Clusters whose claims come from the same post move together, and a
/// cluster holding only generated targets moves with the first cluster of
/// post claims it is related to. Posts with no claims are apportioned
/// separately under the same proportions. A relation goes to its source's split; if its target landed
/// elsewhere it is dropped and counted.
pub fn split(
    posts: &[Post],
    claims: &[ClaimTuple],
    topics: &[TopicTuple],
    relations: &[RelationTuple],
    assignment: &ClusterAssignment,
    proportions: &SplitProportions,
    seed: u64,
) -> Result<SplitOutcome> {
    let bad = proportions.violations();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    let nonzero = proportions.as_array().iter().filter(|p| **p > 0.0).count();
    let n_clusters = assignment.cluster_count();
    if n_clusters < nonzero {
        return Err(Error::invalid(
            "clusters",
            format!("fewer clusters ({n_clusters}) than splits ({nonzero})"),
        ));
    }
    let missing: Vec<Violation> = claims
        .iter()
        .filter(|c| !assignment.cluster_of.contains_key(&c.claim_id))
        .map(|c| Violation::new(c.claim_id.as_str(), "claim has no cluster"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }

    let mut uf = UnionFind((0..n_clusters).collect());
    let mut cluster_of_post: HashMap<&str, usize> = HashMap::new();
    for c in claims.iter().filter(|c| c.post_id != GENERATED_POST_ID) {
        let cluster = assignment.cluster_of[&c.claim_id];
        match cluster_of_post.get(c.post_id.as_str()) {
            Some(&other) => uf.union(other, cluster),
            None => {
                cluster_of_post.insert(&c.post_id, cluster);
            }
        }
    }
    // a cluster of generated targets follows one cluster it is related to,
    // the first in relation order, so targets never merge post units
    let has_post_claim: HashSet<usize> = claims
        .iter()
        .filter(|c| c.post_id != GENERATED_POST_ID)
        .map(|c| assignment.cluster_of[&c.claim_id])
        .collect();
    let mut ordered: Vec<&RelationTuple> = relations.iter().collect();
    ordered.sort();
    let mut anchored = HashSet::new();
    for r in ordered {
        let (Some(&a), Some(&b)) = (
            assignment.cluster_of.get(&r.source_claim_id),
            assignment.cluster_of.get(&r.target_claim_id),
        ) else {
            continue;
        };
        let (anchor, loose) = match (has_post_claim.contains(&a), has_post_claim.contains(&b)) {
            (true, false) => (a, b),
            (false, true) => (b, a),
            _ => continue,
        };
        if anchored.insert(loose) {
            uf.union(anchor, loose);
        }
    }
    let unit_of: Vec<usize> = (0..n_clusters).map(|c| uf.find(c)).collect();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &u in &unit_of {
        *sizes.entry(u).or_default() += 1;
    }
    let units: Vec<(usize, usize)> = sizes.into_iter().collect();
    // moving whole groups can leave a split empty; that is allowed
    let split_of_unit = assign_units(&units, proportions, seed);
    let split_of_cluster = |c: usize| split_of_unit[&unit_of[c]];

    let mut bundles: [Bundle; 3] = Default::default();
    let mut cluster_ids: [BTreeSet<usize>; 3] = Default::default();
    for c in 0..n_clusters {
        cluster_ids[split_of_cluster(c)].insert(c);
    }

    let claimless: Vec<(&str, usize)> = posts
        .iter()
        .map(|p| p.post_id.as_str())
        .filter(|id| !cluster_of_post.contains_key(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|id| (id, 1))
        .collect();
    let claimless_split = assign_units(&claimless, proportions, seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut split_of_post: HashMap<&str, usize> = HashMap::new();
    for p in posts {
        let s = match cluster_of_post.get(p.post_id.as_str()) {
            Some(&c) => split_of_cluster(c),
            None => claimless_split[p.post_id.as_str()],
        };
        split_of_post.insert(&p.post_id, s);
        bundles[s].posts.push(p.clone());
    }
    let mut split_of_claim: HashMap<&str, usize> = HashMap::new();
    for c in claims {
        let s = split_of_cluster(assignment.cluster_of[&c.claim_id]);
        split_of_claim.insert(&c.claim_id, s);
        bundles[s].claims.push(c.clone());
    }
    for t in topics {
        if let Some(&s) = split_of_post.get(t.post_id.as_str()) {
            bundles[s].topics.push(t.clone());
        }
    }
    let mut report = SplitReport { units: units.len(), ..SplitReport::default() };
    for r in relations {
        let source = split_of_claim.get(r.source_claim_id.as_str());
        let target = split_of_claim.get(r.target_claim_id.as_str());
        match (source, target) {
            (Some(s), Some(t)) if s == t => bundles[*s].relations.push(r.clone()),
            _ => report.cross_split_relations += 1,
        }
    }
    for (i, ids) in cluster_ids.iter().enumerate() {
        report.clusters[i] = ids.len();
    }
    for b in &mut bundles {
        b.sort();
    }
    Ok(SplitOutcome { bundles, cluster_ids, report })
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json("record", e))?);
        out.push('\n');
    }
    Ok(out)
}

fn bundle_file(bundle: &Bundle, kind: RecordKind) -> Result<String> {
    match kind {
        RecordKind::Post => to_jsonl(&bundle.posts),
        RecordKind::Claim => to_jsonl(&bundle.claims),
        RecordKind::Topic => to_jsonl(&bundle.topics),
        RecordKind::Relation => to_jsonl(&bundle.relations),
    }
}

fn write(path: &Path, body: &[u8]) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn staging_dir(out_dir: &Path) -> PathBuf {
    let name = out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    out_dir.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Writes `out_dir/{train,dev,test}/*.jsonl` plus `manifest.json`.
///
/// `manifest` supplies the run metadata; counts and digests are filled in
/// from the bytes written. Everything is staged in a sibling directory and
/// renamed into place, so a failure leaves no partial dataset behind.
pub fn emit(bundles: &[Bundle; 3], mut manifest: DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    let staging = staging_dir(out_dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = (|| {
        manifest.counts.clear();
        manifest.digests.clear();
        for (name, bundle) in SPLIT_NAMES.iter().zip(bundles) {
            let mut sorted = bundle.clone();
            sorted.sort();
            let dir = staging.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let counts = manifest.counts.entry(name.to_string()).or_default();
            for kind in RecordKind::ALL {
                let body = bundle_file(&sorted, kind)?;
                write(&dir.join(kind.file_name()), body.as_bytes())?;
                counts.insert(kind.file_name().to_string(), sorted.count(kind));
                manifest
                    .digests
                    .insert(format!("{name}/{}", kind.file_name()), sha256_hex(body.as_bytes()));
            }
        }
        let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        json.push('\n');
        write(&staging.join(MANIFEST_FILE), json.as_bytes())?;
        if out_dir.exists() {
            fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        }
        fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(manifest)
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Reads one split back into memory. Lines that fail validation are errors.
pub fn read_bundle(split_dir: &Path) -> Result<Bundle> {
    let mut bundle = Bundle::default();
    for kind in RecordKind::ALL {
        let path = split_dir.join(kind.file_name());
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (n, line) in body.lines().enumerate() {
            let (record, v) = validate_json_line(kind, line, None);
            if !v.is_empty() {
                return Err(Error::Validation(
                    v.into_iter()
                        .map(|v| Violation::new(format!("{}:{} {}", path.display(), n + 1, v.path), v.message))
                        .collect(),
                ));
            }
            match record.expect("valid line parses") {
                Record::Post(p) => bundle.posts.push(p),
                Record::Claim(c) => bundle.claims.push(c),
                Record::Topic(t) => bundle.topics.push(t),
                Record::Relation(r) => bundle.relations.push(r),
            }
        }
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCheck {
    pub manifest: Option<DatasetManifest>,
    pub violations: Vec<Violation>,
    /// Records checked, all files.
    pub records: usize,
}

impl DatasetCheck {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies an emitted dataset: digests and counts against the manifest,
/// every record against its schema and references within its split, and
/// that no post or claim id appears in two splits.
pub fn validate_dataset(dir: &Path) -> DatasetCheck {
    let mut violations = Vec::new();
    let manifest = match read_manifest(dir) {
        Ok(m) => Some(m),
        Err(e) => {
            violations.push(Violation::new(MANIFEST_FILE, e.to_string()));
            None
        }
    };
    let mut records = 0;
    let mut owner: BTreeMap<String, &str> = BTreeMap::new();
    for split in SPLIT_NAMES {
        let split_dir = dir.join(split);
        let mut bodies = BTreeMap::new();
        for kind in RecordKind::ALL {
            let rel = format!("{split}/{}", kind.file_name());
            match fs::read(split_dir.join(kind.file_name())) {
                Ok(bytes) => {
                    if let Some(m) = &manifest {
                        match m.digests.get(&rel) {
                            Some(d) if *d == sha256_hex(&bytes) => {}
                            Some(_) => violations.push(Violation::new(&rel, "digest mismatch")),
                            None => violations.push(Violation::new(&rel, "not listed in manifest")),
                        }
                    }
                    bodies.insert(kind, String::from_utf8_lossy(&bytes).into_owned());
                }
                Err(e) => violations.push(Violation::new(&rel, format!("unreadable: {e}"))),
            }
        }
        if let Ok(entries) = fs::read_dir(&split_dir) {
            let known: Vec<&str> = RecordKind::ALL.iter().map(|k| k.file_name()).collect();
            let mut stray: Vec<String> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| !known.contains(&n.as_str()))
                .collect();
            stray.sort();
            for name in stray {
                violations.push(Violation::new(format!("{split}/{name}"), "not listed in manifest"));
            }
        }
        // references resolve within the split
        let mut refs = RefIndex::default();
        for (kind, field, set) in [
            (RecordKind::Post, "post_id", &mut refs.post_ids),
            (RecordKind::Claim, "claim_id", &mut refs.claim_ids),
        ] {
            for line in bodies.get(&kind).map(String::as_str).unwrap_or("").lines() {
                if let Some(id) = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get(field).and_then(|x| x.as_str()).map(str::to_string))
                {
                    set.insert(id);
                }
            }
        }
        for (kind, body) in &bodies {
            let rel = format!("{split}/{}", kind.file_name());
            let mut lines = 0;
            for (n, line) in body.lines().enumerate() {
                lines += 1;
                let (_, v) = validate_json_line(*kind, line, Some(&refs));
                violations.extend(
                    v.into_iter()
                        .map(|v| Violation::new(format!("{rel}:{} {}", n + 1, v.path), v.message)),
                );
            }
            records += lines;
            if let Some(m) = &manifest {
                let expected = m.counts.get(split).and_then(|c| c.get(kind.file_name()));
                if expected != Some(&lines) {
                    violations.push(Violation::new(
                        &rel,
                        format!("manifest count {expected:?} but file has {lines} lines"),
                    ));
                }
            }
        }
        for (field, set) in [("post_id", &refs.post_ids), ("claim_id", &refs.claim_ids)] {
            let mut ids: Vec<&String> = set.iter().collect();
            ids.sort();
            for id in ids {
                if let Some(prev) = owner.insert(format!("{field}:{id}"), split) {
                    violations.push(Violation::new(
                        format!("{split}/{field}"),
                        format!("{id} also appears in {prev}"),
                    ));
                }
            }
        }
    }
    DatasetCheck { manifest, violations, records }
}
