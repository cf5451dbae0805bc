//! Stage entry points shared by the CLI and the pipeline runner. Each takes
//! explicit paths and returns a serializable report.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use litfig_core::taxonomy::Taxonomy;
use litfig_core::vote::{disagreement_stats, propagate, ClusterId, ResolvedClusterLabels};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cluster::{fit_clusters, load_assignments, sample_cluster, ClusterError, ClusterModel, ClusterParams};
use crate::columnar::{write_columnar, ColumnarError};
use crate::embed::{embed_images, load_embeddings, save_embeddings, EmbeddingBackend, EmbeddingError, EmbeddingMatrix};
use crate::entrez::{enrich_pmids, EnrichError, MetadataService};
use crate::fsutil::{to_jsonl, write_atomic, write_json_atomic};
use crate::ingest::{ingest_all, parse_file_list, DownloadPolicy, FileListError, IngestLayout, IngestStatus, PolicyError};
use crate::labels::{
    effective_annotations, read_annotation_log, resolve_all, write_resolved, write_review_queue, write_taxonomy,
};
use crate::samples::{apply_subset, dedup_samples, denormalize, figure_path, sample_key, LabelSources, SubsetSpec};
use crate::shards::{write_manifest, write_shards, ShardError, ShardManifest};
use crate::store::{article_files, compute_stats, read_articles, write_article_jsonl, StoreError, WhitespaceTokenizer};
use crate::transport::{Transport, TransportError};

pub const EMBEDDING_STEM: &str = "images";
pub const COLUMNAR_FILE: &str = "metadata.lfcol";
pub const STATS_FILE: &str = "stats.json";
pub const MONTAGE_FILE: &str = "montages.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const RESOLVED_FILE: &str = "resolved.jsonl";
pub const REVIEW_FILE: &str = "review_queue.csv";
pub const DISAGREEMENT_FILE: &str = "disagreement.json";
pub const IMAGE_LABELS_FILE: &str = "image_labels.jsonl";
pub const SKIPPED_FILE: &str = "skipped.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    FileList(#[from] FileListError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Extract(#[from] crate::extract::ExtractStageError),
    #[error(transparent)]
    Enrich(#[from] EnrichError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Columnar(#[from] ColumnarError),
    #[error(transparent)]
    Taxonomy(#[from] crate::labels::TaxonomyFileError),
    #[error(transparent)]
    Eval(#[from] crate::evalio::EvalIoError),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_at(path: &Path) -> impl FnOnce(io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub entries: usize,
    pub ok: usize,
    pub failed: usize,
    pub skipped: usize,
    pub bytes: u64,
}

pub fn ingest_stage(
    file_list: &Path,
    transport: &dyn Transport,
    out: &Path,
    policy: &DownloadPolicy,
    workers: usize,
) -> Result<IngestSummary, StageError> {
    policy.validate()?;
    let f = fs::File::open(file_list).map_err(io_at(file_list))?;
    let entries = parse_file_list(f)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let records = ingest_all(&entries, policy, transport, &IngestLayout::new(out), workers).map_err(io_at(out))?;
    let count = |s| records.iter().filter(|r| r.status == s).count();
    Ok(IngestSummary {
        entries: records.len(),
        ok: count(IngestStatus::Ok),
        failed: count(IngestStatus::Failed),
        skipped: count(IngestStatus::Skipped),
        bytes: records.iter().map(|r| r.bytes).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichSummary {
    pub articles: usize,
    pub pmids: usize,
    pub records: usize,
    pub updated: usize,
    pub requests: usize,
    pub service: bool,
}

/// Copies the article files from `input` to `out` (when they differ) and
/// fills enrichment fields there. Without a service the copy is unchanged.
pub fn enrich_stage(
    input: &Path,
    out: &Path,
    service: Option<&dyn MetadataService>,
    batch_size: usize,
    policy: &DownloadPolicy,
) -> Result<EnrichSummary, StageError> {
    if input != out {
        copy_article_files(input, out)?;
    }
    let articles = read_articles(out).map_err(io_at(out))?;
    let pmids: Vec<u64> = articles.iter().filter_map(|a| a.pmid).collect();
    let mut summary = EnrichSummary {
        articles: articles.len(),
        pmids: pmids.len(),
        records: 0,
        updated: 0,
        requests: 0,
        service: service.is_some(),
    };
    if let Some(service) = service {
        let (records, log) = enrich_pmids(&pmids, batch_size, service, &policy.gate(), &policy.retry())?;
        summary.records = records.len();
        summary.requests = log.len();
        summary.updated = crate::store::apply_enrichment(out, &records).map_err(io_at(out))?;
    }
    Ok(summary)
}

fn copy_article_files(input: &Path, out: &Path) -> Result<(), StageError> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    for old in article_files(out).map_err(io_at(out))? {
        fs::remove_file(&old).map_err(io_at(&old))?;
    }
    for src in article_files(input).map_err(io_at(input))? {
        let dst = out.join(src.file_name().expect("article files have names"));
        let bytes = fs::read(&src).map_err(io_at(&src))?;
        write_atomic(&dst, &bytes).map_err(io_at(&dst))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSummary {
    pub articles: usize,
    pub files: usize,
    pub stats: PathBuf,
}

/// Re-chunks articles into capped files under `out` and writes corpus
/// statistics next to them.
pub fn store_stage(input: &Path, out: &Path, max_per_file: usize) -> Result<StoreSummary, StageError> {
    let articles = read_articles(input).map_err(io_at(input))?;
    let files = if input == out {
        article_files(out).map_err(io_at(out))?
    } else {
        fs::create_dir_all(out).map_err(io_at(out))?;
        for old in article_files(out).map_err(io_at(out))? {
            fs::remove_file(&old).map_err(io_at(&old))?;
        }
        write_article_jsonl(&articles, out, max_per_file)?
    };
    let stats = compute_stats(&articles, &WhitespaceTokenizer);
    let stats_path = out.join(STATS_FILE);
    write_json_atomic(&stats_path, &stats).map_err(io_at(&stats_path))?;
    Ok(StoreSummary {
        articles: articles.len(),
        files: files.len(),
        stats: stats_path,
    })
}

/// Sample key to image path for every figure whose file exists.
pub fn image_index(articles_dir: &Path, media_dir: &Path) -> Result<BTreeMap<String, PathBuf>, StageError> {
    let articles = read_articles(articles_dir).map_err(io_at(articles_dir))?;
    let mut out = BTreeMap::new();
    for a in &articles {
        for f in &a.figure_set {
            let path = figure_path(media_dir, a, f);
            if !f.missing && path.is_file() {
                out.entry(sample_key(&a.accession_id, &f.image_id)).or_insert(path);
            }
        }
    }
    Ok(out)
}

/// Figures in corpus order, for embedding.
fn figure_list(articles_dir: &Path, media_dir: &Path) -> Result<(Vec<(String, PathBuf)>, Vec<(String, String)>), StageError> {
    let articles = read_articles(articles_dir).map_err(io_at(articles_dir))?;
    let mut images = Vec::new();
    let mut missing = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for a in &articles {
        for f in &a.figure_set {
            let key = sample_key(&a.accession_id, &f.image_id);
            if !seen.insert(key.clone()) {
                continue;
            }
            let path = figure_path(media_dir, a, f);
            if f.missing || !path.is_file() {
                missing.push((key, "image file missing".to_string()));
            } else {
                images.push((key, path));
            }
        }
    }
    Ok((images, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub images_in: usize,
    pub rows: usize,
    pub skipped: usize,
    pub dim: usize,
    pub header: PathBuf,
}

pub fn embed_stage(
    articles_dir: &Path,
    media_dir: &Path,
    backend: &dyn EmbeddingBackend,
    out: &Path,
) -> Result<EmbedSummary, StageError> {
    let (images, missing) = figure_list(articles_dir, media_dir)?;
    let images_in = images.len() + missing.len();
    let embedded = embed_images(&images, backend);
    let mut skipped = missing;
    skipped.extend(embedded.skipped);
    fs::create_dir_all(out).map_err(io_at(out))?;
    let keys: Vec<String> = skipped.iter().map(|(k, _)| k.clone()).collect();
    let header = save_embeddings(&embedded.matrix, &keys, out, EMBEDDING_STEM)?;
    let skipped_path = out.join(SKIPPED_FILE);
    let rows: Vec<Value> = skipped
        .iter()
        .map(|(k, r)| serde_json::json!({"image_key": k, "reason": r}))
        .collect();
    write_atomic(&skipped_path, &to_jsonl(&rows).map_err(io_at(&skipped_path))?).map_err(io_at(&skipped_path))?;
    Ok(EmbedSummary {
        images_in,
        rows: embedded.matrix.n(),
        skipped: skipped.len(),
        dim: embedded.matrix.d,
        header,
    })
}

/// Embeds each text with `backend` (the UTF-8 bytes are the input).
/// Duplicate texts are embedded once.
pub fn embed_texts(texts: &[String], backend: &dyn EmbeddingBackend) -> Result<EmbeddingMatrix, StageError> {
    let mut keys: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in texts {
        if seen.insert(t.as_str()) {
            keys.push(t.clone());
        }
    }
    let mut values = Vec::with_capacity(keys.len() * backend.dim());
    for t in &keys {
        let v = backend
            .embed(t.as_bytes())
            .map_err(|e| StageError::Invalid(format!("text {t:?}: {e}")))?;
        if v.len() != backend.dim() {
            return Err(StageError::Invalid(format!("text {t:?}: backend returned {} values", v.len())));
        }
        values.extend(v);
    }
    Ok(EmbeddingMatrix::new(backend.dim(), values, keys)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub images: usize,
    pub k: usize,
    pub components: usize,
    pub cumulative_variance: f64,
    pub reached_target: bool,
    pub iterations: usize,
    pub converged: bool,
    pub inertia: f64,
    pub sizes: BTreeMap<ClusterId, usize>,
}

pub fn cluster_stage(embeddings: &Path, params: &ClusterParams, out: &Path) -> Result<ClusterSummary, StageError> {
    let (m, _) = load_embeddings(embeddings)?;
    let model = fit_clusters(&m, params)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    model.save(out).map_err(io_at(out))?;
    Ok(ClusterSummary {
        images: model.assignments.len(),
        k: model.k(),
        components: model.pca.components.len(),
        cumulative_variance: model.pca.explained_variance_ratio.iter().sum(),
        reached_target: model.pca.reached_target,
        iterations: model.iterations,
        converged: model.converged,
        inertia: model.inertia,
        sizes: model.sizes(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub cluster_id: ClusterId,
    pub size: usize,
    pub image_keys: Vec<String>,
}

/// Writes one montage (sampled image keys) per cluster plus the taxonomy
/// annotators work against.
pub fn annotate_export(
    clusters_dir: &Path,
    taxonomy: &Taxonomy,
    sample_size: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<Montage>, StageError> {
    let model = ClusterModel::load(clusters_dir)?;
    let sizes = model.sizes();
    let mut montages = Vec::new();
    for c in 0..model.k() as ClusterId {
        montages.push(Montage {
            cluster_id: c,
            size: sizes.get(&c).copied().unwrap_or(0),
            image_keys: sample_cluster(&model, c, sample_size, seed)?,
        });
    }
    fs::create_dir_all(out).map_err(io_at(out))?;
    let p = out.join(MONTAGE_FILE);
    write_json_atomic(&p, &montages).map_err(io_at(&p))?;
    let p = out.join(TAXONOMY_FILE);
    write_taxonomy(taxonomy, &p).map_err(io_at(&p))?;
    Ok(montages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveSummary {
    pub log_records: usize,
    pub annotated_clusters: usize,
    pub resolved: usize,
    pub needs_review: usize,
    pub review_rows: usize,
    pub unresolved: Vec<ClusterId>,
    pub labeled_images: usize,
    pub unlabeled_images: usize,
}

/// Majority vote over the annotation log, the review queue, disagreement
/// statistics and, given assignments, per-image labels.
pub fn resolve_stage(
    log: &Path,
    taxonomy: &Taxonomy,
    assignments: Option<&Path>,
    out: &Path,
) -> Result<ResolveSummary, StageError> {
    let records = read_annotation_log(log).map_err(io_at(log))?;
    let groups = effective_annotations(&records);
    let resolution = resolve_all(&groups, taxonomy);
    fs::create_dir_all(out).map_err(io_at(out))?;
    let p = out.join(RESOLVED_FILE);
    write_resolved(&resolution.resolved, &p).map_err(io_at(&p))?;
    let p = out.join(REVIEW_FILE);
    let review_rows = write_review_queue(&resolution.resolved, &p).map_err(io_at(&p))?;
    let p = out.join(DISAGREEMENT_FILE);
    write_json_atomic(&p, &disagreement_stats(&groups)).map_err(io_at(&p))?;
    let mut summary = ResolveSummary {
        log_records: records.len(),
        annotated_clusters: groups.len(),
        resolved: resolution.resolved.len(),
        needs_review: resolution.resolved.values().filter(|r| r.needs_review).count(),
        review_rows,
        unresolved: groups
            .keys()
            .filter(|c| !resolution.resolved.contains_key(c))
            .copied()
            .collect(),
        labeled_images: 0,
        unlabeled_images: 0,
    };
    if let Some(a) = assignments {
        let assignments = load_assignments(a)?;
        let (labeled, unlabeled): (BTreeMap<String, ClusterId>, BTreeMap<String, ClusterId>) = assignments
            .into_iter()
            .partition(|(_, c)| resolution.resolved.contains_key(c));
        let labels = propagate(&resolution.resolved, &labeled).expect("only resolved clusters are propagated");
        let rows: Vec<Value> = labels
            .iter()
            .map(|(k, r)| {
                serde_json::json!({
                    "image_key": k,
                    "cluster_id": r.cluster_id,
                    "panel_type": r.panel_type,
                    "primary_global": r.primary_global,
                    "primary_local": r.primary_local,
                    "secondary_globals": r.secondary_globals,
                    "secondary_locals": r.secondary_locals,
                })
            })
            .collect();
        let p = out.join(IMAGE_LABELS_FILE);
        write_atomic(&p, &to_jsonl(&rows).map_err(io_at(&p))?).map_err(io_at(&p))?;
        summary.labeled_images = labels.len();
        summary.unlabeled_images = unlabeled.len();
    }
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct SerializeInputs {
    pub articles: PathBuf,
    pub media: PathBuf,
    pub assignments: Option<PathBuf>,
    pub resolved: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializeOptions {
    pub shard_size: usize,
    pub workers: usize,
    pub subset: SubsetSpec,
    pub dedup: bool,
    pub columnar: bool,
}

impl Default for SerializeOptions {
    fn default() -> Self {
        Self {
            shard_size: 10_000,
            workers: 1,
            subset: SubsetSpec::All,
            dedup: false,
            columnar: true,
        }
    }
}

/// Per-step conservation counts: every step's input equals its output
/// plus what it dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializeSummary {
    pub figures_in: usize,
    pub denormalized: usize,
    pub skipped_missing: usize,
    pub duplicates_removed: usize,
    pub subset: crate::samples::SubsetCounts,
    pub samples_written: usize,
    pub shards: usize,
    pub manifest: PathBuf,
    pub columnar: Option<PathBuf>,
}

pub fn serialize_stage(
    inputs: &SerializeInputs,
    opts: &SerializeOptions,
    out: &Path,
) -> Result<(SerializeSummary, ShardManifest), StageError> {
    let articles = read_articles(&inputs.articles).map_err(io_at(&inputs.articles))?;
    let assignments = inputs.assignments.as_deref().map(load_assignments).transpose()?;
    let resolved: Option<BTreeMap<ClusterId, ResolvedClusterLabels>> = inputs
        .resolved
        .as_deref()
        .map(|p| crate::labels::read_resolved(p).map_err(io_at(p)))
        .transpose()?;
    let features = inputs.embeddings.as_deref().map(load_embeddings).transpose()?.map(|(m, _)| m);
    let figures_in = articles.iter().map(|a| a.figure_set.len()).sum();
    let d = denormalize(
        &articles,
        &inputs.media,
        LabelSources {
            assignments: assignments.as_ref(),
            resolved: resolved.as_ref(),
            features: features.as_ref(),
        },
    );
    let denormalized = d.samples.len();
    let skipped_missing = d.skipped.len();
    let (samples, duplicates_removed) = if opts.dedup {
        dedup_samples(d.samples)
    } else {
        (d.samples, 0)
    };
    let (samples, subset) =
        apply_subset(samples, &opts.subset).map_err(|e| StageError::Invalid(format!("subset: {e}")))?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let skipped_path = out.join(SKIPPED_FILE);
    write_atomic(&skipped_path, &to_jsonl(&d.skipped).map_err(io_at(&skipped_path))?).map_err(io_at(&skipped_path))?;
    let spec = serde_json::to_value(&opts.subset).expect("subset specs serialize");
    let mut manifest = write_shards(&samples, out, opts.shard_size, opts.workers, opts.subset.name(), spec)?;
    let mut columnar = None;
    if opts.columnar {
        let rows: Vec<_> = samples.iter().map(|s| &s.metadata).collect();
        let p = out.join(COLUMNAR_FILE);
        write_columnar(&rows, &p)?;
        manifest.columnar = Some(COLUMNAR_FILE.to_string());
        write_manifest(&manifest, out)?;
        columnar = Some(p);
    }
    Ok((
        SerializeSummary {
            figures_in,
            denormalized,
            skipped_missing,
            duplicates_removed,
            subset,
            samples_written: manifest.total_samples,
            shards: manifest.shards.len(),
            manifest: out.join(crate::shards::MANIFEST_FILE),
            columnar,
        },
        manifest,
    ))
}
