use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use litfig::cluster::{ClusterModel, ClusterParams};
use litfig::columnar::{ColumnarReader, Predicate};
use litfig::core::subset::default_keep_set;
use litfig::core::taxonomy::Taxonomy;
use litfig::embed::{load_embeddings, save_embeddings, serve_worker, EmbeddingBackend, HashBackend, ProcessBackend};
use litfig::entrez::HttpService;
use litfig::evalio::{self, BootstrapConfig, RetrievalTask, TaskSpec};
use litfig::ingest::{DownloadPolicy, IngestLayout};
use litfig::labels::{read_taxonomy, write_taxonomy};
use litfig::pipeline::{self, Overrides, PipelineConfig, SERVICE_URL_ENV};
use litfig::samples::SubsetSpec;
use litfig::service::{serve_forever, AppState, ServiceConfig};
use litfig::shards::{benchmark_io, stream_shards, write_loose_files, ShardSource, ShardStream, StreamCursor};
use litfig::stages::{self, SerializeInputs, SerializeOptions};
use litfig::store::{compute_stats, read_articles, WhitespaceTokenizer};
use litfig::transport::transport_for;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "litfig", version, about = "Build, label, shard and evaluate figure-caption datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and unpack the packages listed in a mirror file list.
    Ingest(IngestArgs),
    /// Parse ingested nXML into article JSONL files.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_per_file: usize,
    },
    /// Add MeSH terms and citing PMIDs to article files in place.
    Enrich {
        #[arg(long = "in")]
        input: PathBuf,
        /// Falls back to the LITFIG_ENTREZ_URL environment variable.
        #[arg(long)]
        service_url: Option<String>,
        #[arg(long, default_value_t = 200)]
        batch_size: usize,
        #[arg(long, default_value_t = 3.0)]
        rate: f64,
        #[arg(long, default_value_t = 5)]
        retries: u32,
    },
    /// Corpus statistics over article JSONL files.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed figure images (or lines of text with --texts).
    Embed(EmbedArgs),
    /// Serve the embedding worker protocol on stdin/stdout with the hash backend.
    EmbedWorker {
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// PCA then k-means over saved embeddings.
    Cluster {
        /// Embedding header JSON.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.99)]
        variance: f64,
        #[arg(long, default_value_t = 25)]
        max_components: usize,
        #[arg(long, default_value_t = 300)]
        max_iters: usize,
    },
    /// Cluster annotation: montage export and the HTTP service.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Majority vote over an annotation log.
    Resolve {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// `image_key,cluster_id` CSV; adds per-image labels.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Write figure-level tar shards and the columnar metadata file.
    Serialize(SerializeArgs),
    /// Read shards back in order, or benchmark streaming against loose files.
    Stream(StreamArgs),
    /// Filter rows of a columnar metadata file.
    Query {
        #[arg(long)]
        columnar: PathBuf,
        /// e.g. `article_license.group = 'commercial' and image_cluster_id >= 2`
        #[arg(long = "where")]
        predicate: Option<String>,
        /// Comma-separated columns to print (default: all).
        #[arg(long)]
        columns: Option<String>,
        /// Print only the number of matching rows.
        #[arg(long)]
        count: bool,
    },
    /// Zero-shot classification, retrieval and weight merging.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write the built-in concept taxonomy as JSON.
    Taxonomy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Config-driven multi-stage runs.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Run every stage over the bundled synthetic corpus.
    Demo {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    file_list: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Local directory or ftp:// URL holding the packages (default: the file
    /// list's directory).
    #[arg(long)]
    mirror: Option<String>,
    #[arg(long, default_value_t = 3.0)]
    rate: f64,
    #[arg(long, default_value_t = 5)]
    retries: u32,
    #[arg(long, default_value_t = 500)]
    retry_delay_ms: u64,
    #[arg(long, default_value = "nxml,jpg", value_delimiter = ',')]
    keep: Vec<String>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Hash,
    Process,
}

#[derive(Args)]
struct EmbedArgs {
    /// Article JSONL directory.
    #[arg(long, required_unless_present = "texts")]
    articles: Option<PathBuf>,
    /// Ingest directory (images live under its `articles/`).
    #[arg(long, required_unless_present = "texts")]
    ingest: Option<PathBuf>,
    /// Embed each line of this file instead of images.
    #[arg(long, conflicts_with_all = ["articles", "ingest"])]
    texts: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "texts")]
    stem: String,
    #[arg(long, value_enum, default_value = "hash")]
    backend: BackendKind,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Worker command for the process backend.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    command: Vec<String>,
}

impl EmbedArgs {
    fn backend(&self) -> io::Result<Box<dyn EmbeddingBackend>> {
        match self.backend {
            BackendKind::Hash => Ok(Box::new(HashBackend { dim: self.dim })),
            BackendKind::Process => {
                let (program, args) = self
                    .command
                    .split_first()
                    .ok_or_else(|| io::Error::other("--command is required with --backend process"))?;
                Ok(Box::new(ProcessBackend::spawn(program, args, self.dim)?))
            }
        }
    }
}

#[derive(Subcommand)]
enum AnnotateCommand {
    /// Sample a montage per cluster and write it with the taxonomy.
    Export {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        sample_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the annotation HTTP API.
    Serve {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        ingest: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 30)]
        sample_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_annotators_per_cluster: Option<usize>,
        #[arg(long)]
        max_clusters_per_annotator: Option<usize>,
    },
}

#[derive(Args)]
struct SerializeArgs {
    /// Article JSONL directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Ingest directory (images live under its `articles/`).
    #[arg(long)]
    ingest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Resolved labels JSONL.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Embedding header JSON; rows become `image_features`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    shard_size: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// JSON list of global concepts to keep, or `default` for the built-in set.
    #[arg(long)]
    filter: Option<String>,
    /// Fail instead of dropping samples without a global label.
    #[arg(long, requires = "filter")]
    strict: bool,
    #[arg(long)]
    balance_cap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop exact (image hash, caption) duplicates first.
    #[arg(long)]
    dedup: bool,
    #[arg(long)]
    no_columnar: bool,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long, required_unless_present = "shards")]
    manifest: Option<PathBuf>,
    /// Shard paths to read instead of a manifest.
    #[arg(long, num_args = 1.., conflicts_with = "manifest")]
    shards: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    from_shard: usize,
    #[arg(long)]
    limit: Option<usize>,
    /// Measure sequential shard reads against random loose-file reads.
    #[arg(long, requires = "manifest")]
    benchmark: bool,
    /// Directory for the loose-file copy (default: a temporary directory).
    #[arg(long)]
    loose_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Closed-VQA accuracy, averaged over caption variants.
    Classify(EvalArgs),
    /// Recall@k in both directions.
    Retrieve(EvalArgs),
    /// Interpolate two parameter sets: (1 - alpha) * base + alpha * adapted.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Image embedding header, then text embedding header (keys are texts).
    #[arg(long, num_args = 1..=2, value_delimiter = ',', required = true)]
    embeddings: Vec<PathBuf>,
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embed task texts with the hash backend of this dimension when no text
    /// embeddings are given.
    #[arg(long)]
    hash_dim: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    k: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated stages (default: all).
        #[arg(long)]
        stages: Option<String>,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn print_json<T: Serialize>(v: &T) -> Result<(), AnyError> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy, AnyError> {
    Ok(match path {
        Some(p) => read_taxonomy(p)?,
        None => Taxonomy::builtin(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Pipeline(PipelineCommand::Run { config, stages }) => run_pipeline(&config, stages.as_deref()),
        other => match dispatch(other) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}

fn run_pipeline(config: &Path, stages: Option<&str>) -> ExitCode {
    let result = PipelineConfig::load(config).and_then(|cfg| {
        let stages = match stages {
            Some(s) => pipeline::parse_stages(s).map_err(pipeline::PipelineError::Config)?,
            None => pipeline::Stage::ALL.to_vec(),
        };
        pipeline::run(&cfg, &stages, Overrides::default())
    });
    match result {
        Ok(report) => {
            for s in &report.stages {
                eprintln!("{:<16} {:?} {:.2}s", s.stage.as_str(), s.status, s.seconds);
            }
            let _ = print_json(&report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), AnyError> {
    match command {
        Command::Ingest(a) => {
            let mirror = match a.mirror {
                Some(m) => m,
                None => a
                    .file_list
                    .parent()
                    .unwrap_or(Path::new("."))
                    .to_string_lossy()
                    .into_owned(),
            };
            let policy = DownloadPolicy {
                max_requests_per_second: a.rate,
                max_retries: a.retries,
                retry_base_delay: std::time::Duration::from_millis(a.retry_delay_ms),
                keep_extensions: a.keep.iter().map(|e| e.trim_start_matches('.').to_lowercase()).collect(),
                ..DownloadPolicy::default()
            };
            let transport = transport_for(&mirror)?;
            print_json(&stages::ingest_stage(&a.file_list, transport.as_ref(), &a.out, &policy, a.workers)?)
        }
        Command::Extract {
            input,
            out,
            max_per_file,
        } => print_json(&litfig::extract::run_extract(&input, &out, max_per_file)?),
        Command::Enrich {
            input,
            service_url,
            batch_size,
            rate,
            retries,
        } => {
            let url = service_url
                .or_else(|| std::env::var(SERVICE_URL_ENV).ok())
                .ok_or_else(|| format!("--service-url or {SERVICE_URL_ENV} is required"))?;
            let service = HttpService::new(&url);
            let policy = DownloadPolicy {
                max_requests_per_second: rate,
                max_retries: retries,
                ..DownloadPolicy::default()
            };
            policy.validate()?;
            print_json(&stages::enrich_stage(&input, &input, Some(&service), batch_size, &policy)?)
        }
        Command::Stats { input, out } => {
            let articles = read_articles(&input)?;
            let stats = compute_stats(&articles, &WhitespaceTokenizer);
            litfig::fsutil::write_json_atomic(&out, &stats)?;
            print_json(&stats)
        }
        Command::Embed(a) => {
            let backend = a.backend()?;
            if let Some(texts) = &a.texts {
                let lines: Vec<String> = io::BufReader::new(fs::File::open(texts)?)
                    .lines()
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .filter(|l| !l.is_empty())
                    .collect();
                let m = stages::embed_texts(&lines, backend.as_ref())?;
                fs::create_dir_all(&a.out)?;
                let header = save_embeddings(&m, &[], &a.out, &a.stem)?;
                return print_json(&serde_json::json!({"rows": m.n(), "dim": m.d, "header": header}));
            }
            let articles = a.articles.as_deref().expect("clap requires it");
            let media = IngestLayout::new(a.ingest.as_deref().expect("clap requires it")).articles();
            print_json(&stages::embed_stage(articles, &media, backend.as_ref(), &a.out)?)
        }
        Command::EmbedWorker { dim } => {
            serve_worker(&HashBackend { dim }, io::stdin().lock(), io::stdout().lock())?;
            Ok(())
        }
        Command::Cluster {
            embeddings,
            out,
            k,
            seed,
            variance,
            max_components,
            max_iters,
        } => {
            let params = ClusterParams {
                k,
                seed,
                variance_target: variance,
                max_components: Some(max_components),
                max_iters,
                ..ClusterParams::default()
            };
            print_json(&stages::cluster_stage(&embeddings, &params, &out)?)
        }
        Command::Annotate(AnnotateCommand::Export {
            clusters,
            out,
            taxonomy,
            sample_size,
            seed,
        }) => {
            let t = load_taxonomy(taxonomy.as_deref())?;
            let m = stages::annotate_export(&clusters, &t, sample_size, seed, &out)?;
            print_json(&serde_json::json!({"clusters": m.len(), "montages": out.join(stages::MONTAGE_FILE)}))
        }
        Command::Annotate(AnnotateCommand::Serve {
            clusters,
            articles,
            ingest,
            log,
            taxonomy,
            addr,
            sample_size,
            seed,
            max_annotators_per_cluster,
            max_clusters_per_annotator,
        }) => {
            let model = ClusterModel::load(&clusters)?;
            let images = stages::image_index(&articles, &IngestLayout::new(&ingest).articles())?;
            let config = ServiceConfig {
                sample_size,
                seed,
                max_annotators_per_cluster,
                max_clusters_per_annotator,
            };
            let state = AppState::open(model, load_taxonomy(taxonomy.as_deref())?, images, &log, config)?;
            eprintln!("listening on http://{addr}");
            serve_forever(state, addr)?;
            Ok(())
        }
        Command::Resolve {
            log,
            out,
            taxonomy,
            assignments,
        } => {
            let t = load_taxonomy(taxonomy.as_deref())?;
            print_json(&stages::resolve_stage(&log, &t, assignments.as_deref(), &out)?)
        }
        Command::Serialize(a) => serialize(a),
        Command::Stream(a) => stream(a),
        Command::Query {
            columnar,
            predicate,
            columns,
            count,
        } => {
            let mut reader = ColumnarReader::open(&columnar)?;
            let rows = match &predicate {
                Some(p) => reader.scan(&Predicate::parse(p)?)?,
                None => (0..reader.rows()).collect(),
            };
            if count {
                println!("{}", rows.len());
                return Ok(());
            }
            let fields: Option<Vec<&str>> = columns.as_deref().map(|c| c.split(',').map(str::trim).collect());
            let out = reader.read_rows(&rows, fields.as_deref())?;
            let mut w = io::stdout().lock();
            for row in out {
                serde_json::to_writer(&mut w, &row)?;
                writeln!(w)?;
            }
            Ok(())
        }
        Command::Eval(EvalCommand::Merge {
            base,
            adapted,
            alpha,
            out,
        }) => {
            let merged = evalio::merge_param_files(&base, &adapted, alpha, &out)?;
            print_json(&serde_json::json!({"parameters": merged.len(), "alpha": alpha, "out": out}))
        }
        Command::Eval(EvalCommand::Classify(a)) => {
            let task: TaskSpec = evalio::read_task(&a.task)?;
            let texts: Vec<String> = task.classes.iter().flat_map(|c| c.captions.clone()).collect();
            let (images, text_m) = eval_embeddings(&a, &texts)?;
            let r = evalio::classify(&task, &images, &text_m, &boot(&a))?;
            finish_eval(&a, &r)
        }
        Command::Eval(EvalCommand::Retrieve(a)) => {
            let task: RetrievalTask = evalio::read_task(&a.task)?;
            let texts: Vec<String> = task.pairs.iter().map(|p| p.caption.clone()).collect();
            let (images, text_m) = eval_embeddings(&a, &texts)?;
            let r = evalio::retrieve(&task, &images, &text_m, &a.k, &boot(&a))?;
            finish_eval(&a, &r)
        }
        Command::Taxonomy { out } => {
            write_taxonomy(&Taxonomy::builtin(), &out)?;
            Ok(())
        }
        Command::Demo { out } => {
            let outcome = litfig::demo::run_demo(&out)?;
            print_json(&outcome)
        }
        Command::Pipeline(_) => unreachable!("handled in main"),
    }
}

fn boot(a: &EvalArgs) -> BootstrapConfig {
    BootstrapConfig {
        resamples: a.bootstrap,
        level: a.level,
        seed: a.seed,
    }
}

fn eval_embeddings(
    a: &EvalArgs,
    texts: &[String],
) -> Result<(litfig::embed::EmbeddingMatrix, litfig::embed::EmbeddingMatrix), AnyError> {
    let (images, _) = load_embeddings(&a.embeddings[0])?;
    let text_m = match (a.embeddings.get(1), a.hash_dim) {
        (Some(p), _) => load_embeddings(p)?.0,
        (None, Some(dim)) => stages::embed_texts(texts, &HashBackend { dim })?,
        (None, None) => return Err("give text embeddings as a second --embeddings path, or --hash-dim".into()),
    };
    Ok((images, text_m))
}

fn finish_eval<T: Serialize>(a: &EvalArgs, result: &T) -> Result<(), AnyError> {
    if let Some(out) = &a.out {
        evalio::write_result(result, out)?;
    }
    print_json(result)
}

fn serialize(a: SerializeArgs) -> Result<(), AnyError> {
    let keep_globals: Option<BTreeSet<String>> = match a.filter.as_deref() {
        None => None,
        Some("default") => Some(default_keep_set()),
        Some(path) => {
            let v: serde_json::Value = litfig::fsutil::read_json(Path::new(path))?;
            let list = v.get("keep_globals").cloned().unwrap_or(v);
            Some(serde_json::from_value(list).map_err(|e| format!("{path}: expected a list of concepts: {e}"))?)
        }
    };
    let subset = match (keep_globals, a.balance_cap) {
        (None, None) => SubsetSpec::All,
        (Some(keep_globals), None) => SubsetSpec::Filter {
            keep_globals,
            strict: a.strict,
        },
        (None, Some(cap)) => SubsetSpec::Balance {
            cap_per_local: cap,
            seed: a.seed,
        },
        (Some(keep_globals), Some(cap)) => SubsetSpec::FilterThenBalance {
            keep_globals,
            strict: a.strict,
            cap_per_local: cap,
            seed: a.seed,
        },
    };
    let inputs = SerializeInputs {
        articles: a.input,
        media: IngestLayout::new(&a.ingest).articles(),
        assignments: a.assignments,
        resolved: a.labels,
        embeddings: a.embeddings,
    };
    let opts = SerializeOptions {
        shard_size: a.shard_size,
        workers: a.workers,
        subset,
        dedup: a.dedup,
        columnar: !a.no_columnar,
    };
    let (summary, _) = stages::serialize_stage(&inputs, &opts, &a.out)?;
    print_json(&summary)
}

fn stream(a: StreamArgs) -> Result<(), AnyError> {
    let source = match &a.manifest {
        Some(m) => ShardSource::Manifest(m.clone()),
        None => ShardSource::Paths(a.shards.clone()),
    };
    if a.benchmark {
        let manifest = a.manifest.as_deref().expect("clap requires it");
        let tmp;
        let loose = match &a.loose_dir {
            Some(d) => d.clone(),
            None => {
                tmp = tempfile::tempdir()?;
                tmp.path().to_path_buf()
            }
        };
        let samples = stream_shards(&source)?.collect::<Result<Vec<_>, _>>()?;
        let stems = write_loose_files(&samples, &loose)?;
        drop(samples);
        return print_json(&benchmark_io(manifest, &stems, a.seed)?);
    }
    let stream = ShardStream::resume(
        &source,
        StreamCursor {
            shard: a.from_shard,
            sample: 0,
        },
    )?;
    let mut w = io::stdout().lock();
    for s in stream.take(a.limit.unwrap_or(usize::MAX)) {
        let s = s?;
        let bytes = s.image.bytes()?;
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({"key": s.key, "caption": s.caption, "image_bytes": bytes.len(), "metadata_fields": s.metadata.len()}),
        )?;
        writeln!(w)?;
    }
    Ok(())
}
