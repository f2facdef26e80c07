mod support;

use std::fs;
use std::path::Path;

use synthset::config::{load_config, parse_config_str, Config};
use synthset::dataset::validate_dataset;
use synthset::pipeline::{Pipeline, StageStatus, STAGES};

use support::{demo_workspace, tree};

fn demo_config(root: &Path) -> Config {
    load_config(&demo_workspace(root)).unwrap()
}

#[test]
fn stage_failure_keeps_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    // hide every relation fixture so relation generation fails outright
    let fixtures = dir.path().join("fixtures");
    let hidden = dir.path().join("hidden");
    fs::create_dir_all(&hidden).unwrap();
    for entry in fs::read_dir(&fixtures).unwrap() {
        let path = entry.unwrap().path();
        if fs::read_to_string(&path).unwrap().contains("\"relation\"") {
            fs::rename(&path, hidden.join(path.file_name().unwrap())).unwrap();
        }
    }
    let failure = Pipeline::from_config(cfg.clone()).run().unwrap_err();
    assert_eq!(failure.stage, "annotate");
    assert_eq!(failure.exit_code(), 2);
    assert!(failure.completed.iter().any(|r| r.stage == "fetch"));
    assert!(!cfg.out.exists());

    for entry in fs::read_dir(&hidden).unwrap() {
        let path = entry.unwrap().path();
        fs::rename(&path, fixtures.join(path.file_name().unwrap())).unwrap();
    }
    let report = Pipeline::from_config(cfg.clone()).run().unwrap();
    for stage in ["keywords", "queries", "fetch"] {
        assert_eq!(report.status(stage), Some(StageStatus::Hit), "{stage}");
    }
    assert_eq!(report.source_requests, 0);
    assert_eq!(report.computed_stages(), ["annotate", "cluster", "split", "emit"]);
    assert!(validate_dataset(&cfg.out).is_ok());
}

#[test]
fn corrupt_checkpoint_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    Pipeline::from_config(cfg.clone()).run().unwrap();
    let before = tree(&cfg.out);
    let split_dir = cfg.cache_dir.join("split");
    for entry in fs::read_dir(&split_dir).unwrap() {
        fs::write(entry.unwrap().path(), "{ truncated").unwrap();
    }
    let report = Pipeline::from_config(cfg.clone()).run().unwrap();
    assert_eq!(report.status("split"), Some(StageStatus::Computed));
    assert_eq!(report.provider_calls(), 0);
    assert_eq!(tree(&cfg.out), before);
}

#[test]
fn tampered_output_is_rewritten() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    Pipeline::from_config(cfg.clone()).run().unwrap();
    let before = tree(&cfg.out);
    fs::write(cfg.out.join("test/posts.jsonl"), "").unwrap();
    let report = Pipeline::from_config(cfg.clone()).run().unwrap();
    assert_eq!(report.computed_stages(), ["emit"]);
    assert_eq!(tree(&cfg.out), before);
}

#[test]
fn seed_change_reaches_queries_onward() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = demo_config(dir.path());
    let fixtures = cfg.llm.mock_dir.clone();
    cfg.llm.kind = synthset::config::LlmKind::RuleBased;
    Pipeline::from_config(cfg.clone()).run().unwrap();
    cfg.seed += 1;
    let report = Pipeline::from_config(cfg).run().unwrap();
    assert_eq!(report.status("keywords"), Some(StageStatus::Hit));
    assert_eq!(report.status("queries"), Some(StageStatus::Computed));
    assert!(fixtures.exists());
}

#[test]
fn every_stage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    let report = Pipeline::from_config(cfg.clone()).run().unwrap();
    for stage in STAGES {
        assert_eq!(report.status(stage), Some(StageStatus::Computed), "{stage}");
    }
    let manifest = &report.manifest;
    assert_eq!(manifest.topics.len(), 3);
    assert!(manifest.dropped.contains_key("cross_split_relations"));
    assert_eq!(&synthset::dataset::read_manifest(&cfg.out).unwrap(), manifest);
}

#[test]
fn minimal_config_runs_offline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    // every rule-based keyword appears in every post, so any query matches
    let heavy = ["news", "rumor", "claim", "policy", "update", "facts", "myth", "debate", "change", "crisis"]
        .map(|s| format!("The green card backlog {s} story"))
        .join(" and ");
    let lesser = "rumor viral share truth report official warning update news video government community \
                  family money rules law policy deadline scam friends experts leak story message";
    let mut lines = String::new();
    for i in 0..40 {
        let text = format!("Post {i} says {heavy} is spreading. Words {lesser} number {i}.");
        lines.push_str(&serde_json::json!({"id": i.to_string(), "text": text}).to_string());
        lines.push('\n');
    }
    fs::write(corpus.join("posts.jsonl"), lines).unwrap();
    let body = "topic = \"green card backlog\"\n[llm]\nkind = \"rule-based\"\n";
    let cfg = parse_config_str(body).unwrap().rebase(dir.path());
    assert!(cfg.violations().is_empty(), "{:?}", cfg.violations());
    let report = Pipeline::from_config(cfg.clone()).run().unwrap();
    assert!(report.llm_calls > 0);
    let check = validate_dataset(&cfg.out);
    assert!(check.is_ok(), "{:?}", check.violations);
}

#[test]
fn api_keys_never_reach_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    let secret = "sk-test-should-not-appear";
    std::env::set_var(&cfg.llm.api_key_env, secret);
    Pipeline::from_config(cfg.clone()).run().unwrap();
    for (path, bytes) in tree(&cfg.out).into_iter().chain(tree(&cfg.cache_dir)) {
        assert!(!String::from_utf8_lossy(&bytes).contains(secret), "{path}");
    }
    assert!(!cfg.to_toml().contains(secret));
}
