use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use synthset::config::{load_config, Config, LlmKind, SourceKind, TopicSpec};
use synthset::dataset::{emit, read_bundle, validate_dataset, SplitOutcome};
use synthset::embed::{EmbedOptions, EmbeddingCache};
use synthset::error::{Error, Violation};
use synthset::eval::{macro_f1, map_at_k, rank_by_embedding, read_labeled, relation_gold, relation_labels, Qrels, Ranking};
use synthset::keywords::QueryPlan;
use synthset::model::{KeywordSet, Topic};
use synthset::pipeline::{Annotations, Clustered, Pipeline};
use synthset::source::FetchOutcome;

#[derive(Parser)]
#[command(name = "synthset", version, about = "Build LLM-annotated claim datasets from social media search")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replay LLM completions from this fixture directory.
    #[arg(long, global = true)]
    mock_dir: Option<PathBuf>,
    /// Dataset output directory, or the output file for single-file commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding intermediate stage files.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Directory of JSONL posts used as the search source.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    llm: Option<LlmArg>,
    /// Also save every LLM completion here as a replayable fixture.
    #[arg(long, global = true)]
    record_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    queries: Option<usize>,
    #[arg(long, global = true)]
    heavy_n: Option<usize>,
    #[arg(long, global = true)]
    lesser_n: Option<usize>,
    #[arg(long, global = true)]
    max_posts_per_query: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmArg {
    Mock,
    RuleBased,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Generate heavy and lesser keyword groups for topics.
    Keywords {
        /// Topic titles; defaults to the config's topics.
        topics: Vec<String>,
    },
    /// Sample search queries from the keyword groups in the work directory.
    Queries,
    /// Retrieve posts for the sampled queries.
    Fetch,
    /// Extract claims, label topics and generate relations.
    Annotate,
    /// Embed and cluster claims; rewrite relations onto representatives.
    Cluster,
    /// Split clusters into train, dev and test.
    Split,
    /// Write the dataset and manifest to --out.
    Emit,
    /// Run every stage with checkpoints.
    Pipeline,
    /// Score rankings or predictions.
    Eval {
        #[command(subcommand)]
        metric: EvalCommand,
    },
    /// Check an emitted dataset against its manifest and schemas.
    Validate { dataset_dir: PathBuf },
    /// Print the normalized config.
    Config,
}

#[derive(Args)]
struct DatasetSource {
    /// Emitted dataset to derive qrels or gold labels from.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrievalTask {
    /// Posts as queries, claims as candidates.
    Claims,
    /// Topic labels as queries, posts as candidates.
    Topics,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// MAP@K over a ranking file, or over the configured embedder's ranking.
    Map {
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Qrels as TSV or JSONL.
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// JSONL `{query_id, cand_id, score}`; without it candidates are
        /// ranked by embedding similarity.
        #[arg(long)]
        ranking: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "claims")]
        task: RetrievalTask,
        #[command(flatten)]
        data: DatasetSource,
    },
    /// Macro F1 of relation predictions.
    F1 {
        /// JSONL `{item_id, label}`.
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL `{item_id, label}`; defaults to the dataset's relations.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[command(flatten)]
        data: DatasetSource,
    },
}

enum Failure {
    Error(Error),
    Violations(Vec<Violation>),
    /// Already printed; exit with this code.
    Reported(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn build_config(c: &Common, topics: &[String]) -> CliResult<Config> {
    let mut cfg = match &c.config {
        Some(path) => load_config(path).map_err(Failure::Violations)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.mock_dir {
        cfg.llm.kind = LlmKind::Mock;
        cfg.llm.mock_dir = d.clone();
    }
    if let Some(k) = c.llm {
        cfg.llm.kind = match k {
            LlmArg::Mock => LlmKind::Mock,
            LlmArg::RuleBased => LlmKind::RuleBased,
            LlmArg::Http => LlmKind::Http,
        };
    }
    if let Some(d) = &c.record_dir {
        cfg.llm.record_dir = Some(d.clone());
    }
    if let Some(d) = &c.corpus {
        cfg.source.kind = SourceKind::Local;
        cfg.source.settings.endpoint = d.to_string_lossy().into_owned();
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &c.cache_dir {
        cfg.cache_dir = d.clone();
    }
    if let Some(t) = c.tau {
        cfg.cluster.tau = t;
    }
    if let Some(n) = c.queries {
        cfg.queries.count = n;
    }
    if let Some(n) = c.heavy_n {
        cfg.keywords.heavy_n = n;
    }
    if let Some(n) = c.lesser_n {
        cfg.keywords.lesser_n = n;
    }
    if let Some(n) = c.max_posts_per_query {
        cfg.source.settings.max_posts_per_query = n;
    }
    if !topics.is_empty() {
        cfg.topic = None;
        cfg.topics = topics.iter().map(|t| TopicSpec::Title(t.clone())).collect();
    }
    let bad = cfg.violations();
    if !bad.is_empty() {
        return Err(Failure::Violations(bad));
    }
    Ok(cfg.normalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut body = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let body = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&body).map_err(|e| Error::json(path.display().to_string(), e))?)
}

/// Every `*.json` file of `dir/stage`, in file-name order.
fn read_stage_dir<T: DeserializeOwned>(work: &Path, stage: &str) -> CliResult<Vec<T>> {
    let dir = work.join(stage);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(dir.display().to_string(), format!("no {stage} files; run the previous stage first")).into());
    }
    files.iter().map(|f| read_json(f)).collect()
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    // a closed pipe is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn work_topics(pipeline: &Pipeline, work: &Path) -> CliResult<Vec<Topic>> {
    let path = work.join("topics.json");
    if path.exists() {
        read_json(&path)
    } else {
        Ok(pipeline.topics()?)
    }
}

fn run(cli: Cli) -> CliResult {
    let c = &cli.common;
    let work = &c.work;
    match &cli.command {
        Command::Keywords { topics } => {
            let p = Pipeline::from_config(build_config(c, topics)?);
            let topics = p.topics()?;
            let mut sets: Vec<KeywordSet> = Vec::new();
            for t in &topics {
                let ks = p.keywords(t)?;
                write_json(&work.join("keywords").join(format!("{}.json", t.topic_id)), &ks)?;
                sets.push(ks);
            }
            write_json(&work.join("topics.json"), &topics)?;
            print_json(&sets);
        }
        Command::Queries => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            for ks in read_stage_dir::<KeywordSet>(work, "keywords")? {
                let plan = p.queries(&ks);
                eprintln!("{}: {} queries", plan.topic_id, plan.queries.len());
                write_json(&work.join("queries").join(format!("{}.json", plan.topic_id)), &plan)?;
            }
        }
        Command::Fetch => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            for plan in read_stage_dir::<QueryPlan>(work, "queries")? {
                let out = p.fetch(&plan)?;
                eprintln!(
                    "{}: {} posts from {} requests ({} failed queries)",
                    plan.topic_id,
                    out.posts.len(),
                    out.report.requests,
                    out.report.failed_queries
                );
                write_json(&work.join("fetch").join(format!("{}.json", plan.topic_id)), &out)?;
            }
        }
        Command::Annotate => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            let fetches: Vec<FetchOutcome> = read_stage_dir(work, "fetch")?;
            let ann = p.annotate(&fetches)?;
            eprintln!(
                "{} posts, {} claims, {} topic labels, {} relations",
                ann.posts.len(),
                ann.claims.len(),
                ann.topics.len(),
                ann.relations.len()
            );
            write_json(&work.join("annotations.json"), &ann)?;
        }
        Command::Cluster => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            let ann: Annotations = read_json(&work.join("annotations.json"))?;
            let cache = EmbeddingCache::open(p.config.cache_dir.join("embeddings.jsonl"))?;
            let clustered = p.cluster(&ann, &cache)?;
            eprintln!(
                "{} claims in {} clusters, {} relations kept",
                clustered.assignment.cluster_of.len(),
                clustered.assignment.cluster_count(),
                clustered.relations.len()
            );
            write_json(&work.join("clusters.json"), &clustered)?;
        }
        Command::Split => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            let ann: Annotations = read_json(&work.join("annotations.json"))?;
            let clustered: Clustered = read_json(&work.join("clusters.json"))?;
            let out = p.split(&ann, &clustered)?;
            eprintln!(
                "clusters per split {:?}, {} cross-split relations dropped",
                out.report.clusters, out.report.cross_split_relations
            );
            write_json(&work.join("split.json"), &out)?;
        }
        Command::Emit => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            let ann: Annotations = read_json(&work.join("annotations.json"))?;
            let clustered: Clustered = read_json(&work.join("clusters.json"))?;
            let split: SplitOutcome = read_json(&work.join("split.json"))?;
            let topics = work_topics(&p, work)?;
            let base = p.manifest(&topics, &ann, &clustered, &split);
            let manifest = emit(&split.bundles, base, &p.config.out)?;
            eprintln!("wrote {}", p.config.out.display());
            print_json(&manifest.counts);
        }
        Command::Pipeline => {
            let p = Pipeline::from_config(build_config(c, &[])?);
            match p.run() {
                Ok(report) => {
                    for r in &report.stages {
                        eprintln!("{:<9} {:<24} {:?}", r.stage, r.scope, r.status);
                    }
                    eprintln!(
                        "provider calls: llm {}, embedding {}, source {}",
                        report.llm_calls, report.embed_calls, report.source_requests
                    );
                    print_json(&report);
                }
                Err(failure) => {
                    for r in &failure.completed {
                        eprintln!("{:<9} {:<24} {:?}", r.stage, r.scope, r.status);
                    }
                    for v in failure.error.violations() {
                        eprintln!("violation: {v}");
                    }
                    eprintln!("error: {failure}");
                    return Err(Failure::Reported(failure.exit_code() as u8));
                }
            }
        }
        Command::Eval { metric } => run_eval(c, metric)?,
        Command::Validate { dataset_dir } => {
            let check = validate_dataset(dataset_dir);
            if !check.is_ok() {
                return Err(Failure::Violations(check.violations));
            }
            eprintln!("ok: {} records", check.records);
        }
        Command::Config => {
            let cfg = build_config(c, &[])?;
            use std::io::Write;
            let _ = write!(std::io::stdout(), "{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn dataset_split(data: &DatasetSource) -> CliResult<Option<synthset::dataset::Bundle>> {
    match &data.dataset {
        None => Ok(None),
        Some(dir) => {
            let check = validate_dataset(dir);
            if !check.is_ok() {
                return Err(Failure::Violations(check.violations));
            }
            Ok(Some(read_bundle(&dir.join(&data.split))?))
        }
    }
}

fn run_eval(c: &Common, metric: &EvalCommand) -> CliResult {
    let report = match metric {
        EvalCommand::Map { k, qrels, ranking, task, data } => {
            let qrels = match (qrels, dataset_split(data)?) {
                (Some(path), _) => Qrels::load(path)?,
                (None, Some(bundle)) => match task {
                    RetrievalTask::Claims => Qrels::claim_matching(&bundle),
                    RetrievalTask::Topics => Qrels::topic_retrieval(&bundle),
                },
                (None, None) => return Err(Error::invalid("eval map", "pass --qrels or --dataset").into()),
            };
            let ranking = match ranking {
                Some(path) => {
                    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    Ranking::parse_jsonl(&body)?
                }
                None => {
                    let mut cfg = match &c.config {
                        Some(path) => load_config(path).map_err(Failure::Violations)?,
                        None => Config::default(),
                    };
                    if let Some(d) = &c.cache_dir {
                        cfg.cache_dir = d.clone();
                    }
                    let p = Pipeline::from_config(cfg);
                    let cache = EmbeddingCache::open(p.config.cache_dir.join("embeddings.jsonl"))?;
                    let clock = synthset::clock::SystemClock;
                    let opts = EmbedOptions {
                        policy: p.config.embedding.retry,
                        clock: &clock,
                        batch_size: p.config.embedding.batch_size,
                    };
                    let ranking = rank_by_embedding(&qrels, p.embedder(), &cache, &opts)?;
                    cache.save()?;
                    ranking
                }
            };
            map_at_k(&ranking, &qrels, *k)?
        }
        EvalCommand::F1 { predictions, gold, labels, data } => {
            let preds = read_labeled(predictions)?;
            let gold = match (gold, dataset_split(data)?) {
                (Some(path), _) => read_labeled(path)?,
                (None, Some(bundle)) => relation_gold(&bundle),
                (None, None) => return Err(Error::invalid("eval f1", "pass --gold or --dataset").into()),
            };
            let labels = labels.clone().unwrap_or_else(relation_labels);
            macro_f1(&preds, &gold, &labels)?
        }
    };
    match &c.out {
        Some(path) => write_json(path, &report)?,
        None => print_json(&report),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violations(v)) => {
            let mut by_path: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for x in v {
                by_path.entry(x.path).or_default().push(x.message);
            }
            for (path, messages) in by_path {
                for m in messages {
                    eprintln!("violation: {path}: {m}");
                }
            }
            ExitCode::from(1)
        }
        Err(Failure::Reported(code)) => ExitCode::from(code),
        Err(Failure::Error(e)) => {
            for v in e.violations() {
                eprintln!("violation: {v}");
            }
            if e.violations().is_empty() {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
