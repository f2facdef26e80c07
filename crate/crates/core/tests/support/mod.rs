#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use synthset::model::EmbeddingVector;

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Config, corpus and fixtures of the demo, without any previous output.
pub fn demo_workspace(into: &Path) -> PathBuf {
    let demo = demo_dir();
    fs::copy(demo.join("synthset.toml"), into.join("synthset.toml")).unwrap();
    copy_dir(&demo.join("corpus"), &into.join("corpus"));
    copy_dir(&demo.join("fixtures"), &into.join("fixtures"));
    into.join("synthset.toml")
}

/// Relative path -> bytes for every file under `dir`.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn cli(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthset"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn unit(values: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector::normalized(values).unwrap()
}

/// `n` unit vectors scattered around a few random centers.
pub fn clustered_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<EmbeddingVector> {
    let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=6))
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let spread = [0.02, 0.08, 0.2, 0.5, 1.5][rng.random_range(0..5)];
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            loop {
                let v: Vec<f64> = c.iter().map(|x| x + rng.random_range(-spread..spread)).collect();
                if v.iter().any(|x| x.abs() > 1e-9) {
                    return unit(v);
                }
            }
        })
        .collect()
}

/// Connected components of the graph with an edge wherever the dot product
/// of two rows exceeds `tau`, by breadth-first search over the full matrix.
/// Labels count up in order of each component's first member.
pub fn components_oracle(vectors: &[EmbeddingVector], tau: f64) -> Vec<usize> {
    let n = vectors.len();
    let adjacent = |i: usize, j: usize| {
        let dot: f64 = vectors[i].values().iter().zip(vectors[j].values()).map(|(a, b)| a * b).sum();
        dot > tau
    };
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if j != i && label[j] == usize::MAX && adjacent(i, j) {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    label
}

/// The partition as a set of member sets, independent of label numbering.
pub fn blocks(labels: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let mut by: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().insert(i);
    }
    by.into_values().collect()
}

/// AP@k written out from its definition: for each rank r <= k holding a
/// relevant item, precision of the top r; their mean over min(|rel|, k).
pub fn naive_ap(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let top: Vec<&String> = ranked.iter().take(k).collect();
    let mut total = 0.0;
    for r in 1..=top.len() {
        if relevant.contains(top[r - 1]) {
            let hits = top[..r].iter().filter(|c| relevant.contains(**c)).count();
            total += hits as f64 / r as f64;
        }
    }
    let denom = relevant.len().min(k);
    if denom == 0 {
        0.0
    } else {
        total / denom as f64
    }
}
