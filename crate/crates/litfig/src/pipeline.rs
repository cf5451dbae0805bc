//! Config-driven stage runner with content-hash completion markers.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use litfig_core::taxonomy::Taxonomy;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::ClusterParams;
use crate::embed::{load_embeddings, save_embeddings, EmbeddingBackend, HashBackend, ProcessBackend};
use crate::entrez::{HttpService, MetadataService};
use crate::evalio::{self, BootstrapConfig, RetrievalTask, TaskSpec};
use crate::fsutil::{hash_paths, read_json, sha256_hex, write_json_atomic};
use crate::ingest::{DownloadPolicy, IngestLayout};
use crate::labels::read_taxonomy;
use crate::stages::{self, SerializeInputs, SerializeOptions, StageError};
use crate::transport::{transport_for, Transport};

pub const MARKER_DIR: &str = ".markers";
pub const REPORT_FILE: &str = "run-report.json";
/// Environment fallback for `enrich.service_url`.
pub const SERVICE_URL_ENV: &str = "LITFIG_ENTREZ_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Extract,
    Enrich,
    Store,
    Embed,
    Cluster,
    AnnotateExport,
    Resolve,
    Serialize,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Extract,
        Stage::Enrich,
        Stage::Store,
        Stage::Embed,
        Stage::Cluster,
        Stage::AnnotateExport,
        Stage::Resolve,
        Stage::Serialize,
        Stage::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::Enrich => "enrich",
            Stage::Store => "store",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::AnnotateExport => "annotate-export",
            Stage::Resolve => "resolve",
            Stage::Serialize => "serialize",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Parses `a,b,c` into stages in pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, String> {
    let set: BTreeSet<Stage> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err("no stages given".into());
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Holds stage markers and the run report.
    pub work_dir: Option<PathBuf>,
    pub file_list: Option<PathBuf>,
    /// Mirror location: a local directory, `file://` or `ftp://` URL.
    pub mirror: Option<String>,
    pub ingest: Option<PathBuf>,
    pub extracted: Option<PathBuf>,
    pub enriched: Option<PathBuf>,
    pub articles: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub annotate: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub shards: Option<PathBuf>,
    pub eval_task: Option<PathBuf>,
    pub eval_text_embeddings: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub rate: f64,
    pub retries: u32,
    pub retry_base_delay_ms: u64,
    pub keep: Vec<String>,
    pub workers: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        let p = DownloadPolicy::default();
        Self {
            rate: p.max_requests_per_second,
            retries: p.max_retries,
            retry_base_delay_ms: p.retry_base_delay.as_millis() as u64,
            keep: p.keep_extensions.into_iter().collect(),
            workers: 4,
        }
    }
}

impl IngestConfig {
    pub fn policy(&self) -> DownloadPolicy {
        DownloadPolicy {
            max_requests_per_second: self.rate,
            max_retries: self.retries,
            retry_base_delay: Duration::from_millis(self.retry_base_delay_ms),
            keep_extensions: self.keep.iter().map(|e| e.trim_start_matches('.').to_lowercase()).collect(),
            ..DownloadPolicy::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichConfig {
    pub service_url: Option<String>,
    /// Run the stage without a metadata service (fields stay empty).
    pub offline: bool,
    pub batch_size: usize,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            service_url: None,
            offline: false,
            batch_size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub max_per_file: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { max_per_file: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedConfig {
    Hash { dim: usize },
    Process { command: Vec<String>, dim: usize },
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig::Hash { dim: 64 }
    }
}

impl EmbedConfig {
    pub fn backend(&self) -> std::io::Result<Box<dyn EmbeddingBackend>> {
        match self {
            EmbedConfig::Hash { dim } => Ok(Box::new(HashBackend { dim: *dim })),
            EmbedConfig::Process { command, dim } => {
                let (program, args) = command
                    .split_first()
                    .ok_or_else(|| std::io::Error::other("embed.command is empty"))?;
                Ok(Box::new(ProcessBackend::spawn(program, args, *dim)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            sample_size: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializeConfig {
    #[serde(flatten)]
    pub options: SerializeOptions,
    /// Attach resolved cluster labels (needs cluster + resolve outputs).
    pub labels: bool,
    /// Attach image embeddings as `image_features`.
    pub features: bool,
}

impl Default for SerializeConfig {
    fn default() -> Self {
        Self {
            options: SerializeOptions::default(),
            labels: true,
            features: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Classify,
    Retrieve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub kind: EvalKind,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kind: EvalKind::Classify,
            bootstrap: 1000,
            level: 0.95,
            seed: 0,
            ks: evalio::DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub enrich: EnrichConfig,
    pub store: StoreConfig,
    pub embed: EmbedConfig,
    pub cluster: ClusterParams,
    pub annotate: AnnotateConfig,
    pub serialize: SerializeConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: prerequisite {prerequisite} has no output at {path}")]
    MissingPrerequisite {
        stage: Stage,
        prerequisite: String,
        path: PathBuf,
    },
    #[error("stage {stage}: output of {prerequisite} changed since it completed (stale input)")]
    StaleInput { stage: Stage, prerequisite: Stage },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// 2 for problems found before any stage ran, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { .. } | PipelineError::Io { .. } => 3,
            _ => 2,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.work_dir,
            &mut p.file_list,
            &mut p.ingest,
            &mut p.extracted,
            &mut p.enriched,
            &mut p.articles,
            &mut p.embeddings,
            &mut p.clusters,
            &mut p.annotate,
            &mut p.annotations,
            &mut p.taxonomy,
            &mut p.labels,
            &mut p.shards,
            &mut p.eval_task,
            &mut p.eval_text_embeddings,
            &mut p.eval,
        ] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        if let Some(m) = p.mirror.as_mut() {
            if !m.contains("://") && Path::new(m.as_str()).is_relative() {
                *m = base.join(m.as_str()).to_string_lossy().into_owned();
            }
        }
    }

    fn service_url(&self) -> Option<String> {
        self.enrich
            .service_url
            .clone()
            .or_else(|| std::env::var(SERVICE_URL_ENV).ok().filter(|s| !s.is_empty()))
    }

    /// Paths each requested stage reads or writes must be declared.
    pub fn validate(&self, stages: &[Stage]) -> Result<(), PipelineError> {
        self.validate_with(stages, false)
    }

    fn validate_with(&self, stages: &[Stage], service_given: bool) -> Result<(), PipelineError> {
        let mut problems = Vec::new();
        if self.paths.work_dir.is_none() {
            problems.push("paths.work_dir is required".to_string());
        }
        for &stage in stages {
            for name in required_paths(self, stage) {
                if path_value(&self.paths, name).is_none() {
                    problems.push(format!("stage {stage} requires paths.{name}"));
                }
            }
        }
        if stages.contains(&Stage::Enrich) && !self.enrich.offline && !service_given && self.service_url().is_none() {
            problems.push(format!("stage enrich requires enrich.service_url or {SERVICE_URL_ENV} (or enrich.offline = true)"));
        }
        if stages.contains(&Stage::Enrich) && self.enrich.batch_size == 0 {
            problems.push("enrich.batch_size must be positive".into());
        }
        if stages.contains(&Stage::Ingest) {
            if let Err(e) = self.ingest.policy().validate() {
                problems.push(format!("ingest: {e}"));
            }
        }
        if stages.contains(&Stage::Serialize) {
            let o = &self.serialize.options;
            if o.shard_size == 0 || o.workers == 0 {
                problems.push("serialize.shard_size and serialize.workers must be positive".into());
            }
        }
        if stages.contains(&Stage::Cluster) && self.cluster.k == 0 {
            problems.push("cluster.k must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(problems.join("; ")))
        }
    }
}

fn path_value<'a>(p: &'a PathsConfig, name: &str) -> Option<&'a Path> {
    let v = match name {
        "file_list" => &p.file_list,
        "ingest" => &p.ingest,
        "extracted" => &p.extracted,
        "enriched" => &p.enriched,
        "articles" => &p.articles,
        "embeddings" => &p.embeddings,
        "clusters" => &p.clusters,
        "annotate" => &p.annotate,
        "annotations" => &p.annotations,
        "labels" => &p.labels,
        "shards" => &p.shards,
        "eval_task" => &p.eval_task,
        "eval" => &p.eval,
        "mirror" => return p.mirror.as_deref().map(Path::new),
        _ => unreachable!("unknown path name {name}"),
    };
    v.as_deref()
}

fn required_paths(cfg: &PipelineConfig, stage: Stage) -> Vec<&'static str> {
    match stage {
        Stage::Ingest => vec!["file_list", "mirror", "ingest"],
        Stage::Extract => vec!["ingest", "extracted"],
        Stage::Enrich => vec!["extracted", "enriched"],
        Stage::Store => vec!["enriched", "articles"],
        Stage::Embed => vec!["articles", "ingest", "embeddings"],
        Stage::Cluster => vec!["embeddings", "clusters"],
        Stage::AnnotateExport => vec!["clusters", "annotate"],
        Stage::Resolve => vec!["annotations", "clusters", "labels"],
        Stage::Serialize => {
            let mut v = vec!["articles", "ingest", "shards"];
            if cfg.serialize.labels {
                v.extend(["clusters", "labels"]);
            }
            if cfg.serialize.features {
                v.push("embeddings");
            }
            v
        }
        Stage::Eval => vec!["embeddings", "eval_task", "eval"],
    }
}

/// Where a stage writes.
fn outputs(cfg: &PipelineConfig, stage: Stage) -> Vec<PathBuf> {
    let p = &cfg.paths;
    let one = |v: &Option<PathBuf>| v.iter().cloned().collect::<Vec<_>>();
    match stage {
        Stage::Ingest => one(&p.ingest),
        Stage::Extract => one(&p.extracted),
        Stage::Enrich => one(&p.enriched),
        Stage::Store => one(&p.articles),
        Stage::Embed => one(&p.embeddings),
        Stage::Cluster => one(&p.clusters),
        Stage::AnnotateExport => one(&p.annotate),
        Stage::Resolve => one(&p.labels),
        Stage::Serialize => one(&p.shards),
        Stage::Eval => one(&p.eval),
    }
}

/// Upstream stages whose outputs a stage reads.
fn prerequisites(cfg: &PipelineConfig, stage: Stage) -> Vec<Stage> {
    match stage {
        Stage::Ingest => vec![],
        Stage::Extract => vec![Stage::Ingest],
        Stage::Enrich => vec![Stage::Extract],
        Stage::Store => vec![Stage::Enrich],
        Stage::Embed => vec![Stage::Ingest, Stage::Store],
        Stage::Cluster => vec![Stage::Embed],
        Stage::AnnotateExport => vec![Stage::Cluster],
        Stage::Resolve => vec![Stage::Cluster],
        Stage::Serialize => {
            let mut v = vec![Stage::Ingest, Stage::Store];
            if cfg.serialize.features {
                v.push(Stage::Embed);
            }
            if cfg.serialize.labels {
                v.extend([Stage::Cluster, Stage::Resolve]);
            }
            v
        }
        Stage::Eval => vec![Stage::Embed],
    }
}

/// Files a stage reads that no stage produces.
fn external_inputs(cfg: &PipelineConfig, stage: Stage) -> Vec<PathBuf> {
    let p = &cfg.paths;
    let mut v: Vec<PathBuf> = Vec::new();
    match stage {
        Stage::Ingest => {
            v.extend(p.file_list.clone());
            if let Some(m) = &p.mirror {
                if !m.contains("://") {
                    v.push(PathBuf::from(m));
                }
            }
        }
        Stage::AnnotateExport => v.extend(p.taxonomy.clone()),
        Stage::Resolve => {
            v.extend(p.annotations.clone());
            v.extend(p.taxonomy.clone());
        }
        Stage::Eval => {
            v.extend(p.eval_task.clone());
            v.extend(p.eval_text_embeddings.clone());
        }
        _ => {}
    }
    v
}

fn inputs(cfg: &PipelineConfig, stage: Stage) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = prerequisites(cfg, stage)
        .into_iter()
        .flat_map(|p| outputs(cfg, p))
        .collect();
    v.extend(external_inputs(cfg, stage));
    v
}

/// Settings that change a stage's output, hashed into its marker.
fn stage_settings(cfg: &PipelineConfig, stage: Stage) -> Value {
    let p = &cfg.paths;
    match stage {
        Stage::Ingest => json!({"mirror": p.mirror, "ingest": cfg.ingest}),
        Stage::Extract => json!({}),
        Stage::Enrich => json!({"service": cfg.service_url(), "enrich": cfg.enrich.batch_size, "offline": cfg.enrich.offline}),
        Stage::Store => json!(cfg.store),
        Stage::Embed => json!(cfg.embed),
        Stage::Cluster => json!(cfg.cluster),
        Stage::AnnotateExport => json!(cfg.annotate),
        Stage::Resolve => json!({}),
        Stage::Serialize => json!(cfg.serialize),
        Stage::Eval => json!({"embed": cfg.embed, "eval": cfg.eval}),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub stage: Stage,
    pub settings_hash: String,
    pub input_hash: String,
    pub output_hash: String,
    pub summary: Value,
}

fn marker_path(work_dir: &Path, stage: Stage) -> PathBuf {
    work_dir.join(MARKER_DIR).join(format!("{}.json", stage.as_str()))
}

fn read_marker(work_dir: &Path, stage: Stage) -> Option<Marker> {
    read_json(&marker_path(work_dir, stage)).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    pub summary: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ok: bool,
    pub stages: Vec<StageOutcome>,
}

/// Stand-ins for the network-facing pieces, used by tests and the demo.
#[derive(Default, Clone, Copy)]
pub struct Overrides<'a> {
    pub transport: Option<&'a dyn Transport>,
    pub service: Option<&'a dyn MetadataService>,
}

fn hash_io(paths: &[PathBuf]) -> Result<String, PipelineError> {
    hash_paths(paths).map_err(|source| PipelineError::Io {
        path: paths.first().cloned().unwrap_or_default(),
        source,
    })
}

/// Runs `stages` in pipeline order. Stages whose marker matches the current
/// settings, inputs and outputs are skipped. The report is also written to
/// the work directory.
pub fn run(cfg: &PipelineConfig, stages: &[Stage], over: Overrides<'_>) -> Result<RunReport, PipelineError> {
    let stages: Vec<Stage> = stages.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    cfg.validate_with(&stages, over.service.is_some())?;
    let work_dir = cfg.paths.work_dir.clone().expect("validated");
    check_prerequisites(cfg, &stages, &work_dir)?;

    let mut report = RunReport {
        ok: true,
        stages: Vec::new(),
    };
    for &stage in &stages {
        let started = Instant::now();
        let settings_hash = sha256_hex(stage_settings(cfg, stage).to_string().as_bytes());
        let input_hash = hash_io(&inputs(cfg, stage))?;
        if let Some(m) = read_marker(&work_dir, stage) {
            if m.settings_hash == settings_hash
                && m.input_hash == input_hash
                && m.output_hash == hash_io(&outputs(cfg, stage))?
            {
                report.stages.push(StageOutcome {
                    stage,
                    status: StageStatus::Skipped,
                    seconds: started.elapsed().as_secs_f64(),
                    summary: m.summary,
                    error: None,
                });
                continue;
            }
        }
        match run_stage(cfg, stage, over) {
            Ok(summary) => {
                let marker = Marker {
                    stage,
                    settings_hash,
                    input_hash,
                    output_hash: hash_io(&outputs(cfg, stage))?,
                    summary: summary.clone(),
                };
                let path = marker_path(&work_dir, stage);
                write_json_atomic(&path, &marker).map_err(|source| PipelineError::Io { path, source })?;
                report.stages.push(StageOutcome {
                    stage,
                    status: StageStatus::Ok,
                    seconds: started.elapsed().as_secs_f64(),
                    summary,
                    error: None,
                });
            }
            Err(source) => {
                let _ = std::fs::remove_file(marker_path(&work_dir, stage));
                report.ok = false;
                report.stages.push(StageOutcome {
                    stage,
                    status: StageStatus::Failed,
                    seconds: started.elapsed().as_secs_f64(),
                    summary: Value::Null,
                    error: Some(source.to_string()),
                });
                write_report(&work_dir, &report)?;
                return Err(PipelineError::Stage { stage, source });
            }
        }
    }
    write_report(&work_dir, &report)?;
    Ok(report)
}

fn write_report(work_dir: &Path, report: &RunReport) -> Result<(), PipelineError> {
    let path = work_dir.join(REPORT_FILE);
    write_json_atomic(&path, report).map_err(|source| PipelineError::Io { path, source })
}

/// Every input a requested stage needs must exist or be produced earlier in
/// the run; a completed upstream stage whose output changed since its marker
/// was written is stale.
fn check_prerequisites(cfg: &PipelineConfig, stages: &[Stage], work_dir: &Path) -> Result<(), PipelineError> {
    for &stage in stages {
        for pre in prerequisites(cfg, stage) {
            if stages.contains(&pre) {
                continue;
            }
            for out in outputs(cfg, pre) {
                if !out.exists() {
                    return Err(PipelineError::MissingPrerequisite {
                        stage,
                        prerequisite: pre.to_string(),
                        path: out,
                    });
                }
            }
            if let Some(m) = read_marker(work_dir, pre) {
                if m.output_hash != hash_io(&outputs(cfg, pre))? {
                    return Err(PipelineError::StaleInput { stage, prerequisite: pre });
                }
            }
        }
        for input in external_inputs(cfg, stage) {
            if !input.exists() {
                return Err(PipelineError::MissingPrerequisite {
                    stage,
                    prerequisite: "input".into(),
                    path: input,
                });
            }
        }
    }
    Ok(())
}

fn taxonomy(cfg: &PipelineConfig) -> Result<Taxonomy, StageError> {
    match &cfg.paths.taxonomy {
        Some(p) => Ok(read_taxonomy(p)?),
        None => Ok(Taxonomy::builtin()),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn run_stage(cfg: &PipelineConfig, stage: Stage, over: Overrides<'_>) -> Result<Value, StageError> {
    let p = &cfg.paths;
    let req = |v: &Option<PathBuf>| v.clone().expect("validated");
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| StageError::Io { path, source }
    };
    match stage {
        Stage::Ingest => {
            let owned;
            let transport: &dyn Transport = match over.transport {
                Some(t) => t,
                None => {
                    owned = transport_for(p.mirror.as_deref().expect("validated"))?;
                    owned.as_ref()
                }
            };
            let s = stages::ingest_stage(
                &req(&p.file_list),
                transport,
                &req(&p.ingest),
                &cfg.ingest.policy(),
                cfg.ingest.workers,
            )?;
            Ok(to_value(&s))
        }
        Stage::Extract => {
            let r = crate::extract::run_extract(&req(&p.ingest), &req(&p.extracted), cfg.store.max_per_file)?;
            Ok(to_value(&r))
        }
        Stage::Enrich => {
            let owned;
            let service: Option<&dyn MetadataService> = if cfg.enrich.offline {
                None
            } else {
                match over.service {
                    Some(s) => Some(s),
                    None => {
                        owned = HttpService::new(&cfg.service_url().expect("validated"));
                        Some(&owned)
                    }
                }
            };
            let s = stages::enrich_stage(
                &req(&p.extracted),
                &req(&p.enriched),
                service,
                cfg.enrich.batch_size,
                &cfg.ingest.policy(),
            )?;
            Ok(to_value(&s))
        }
        Stage::Store => Ok(to_value(&stages::store_stage(
            &req(&p.enriched),
            &req(&p.articles),
            cfg.store.max_per_file,
        )?)),
        Stage::Embed => {
            let backend = cfg.embed.backend().map_err(|e| StageError::Invalid(format!("embedding backend: {e}")))?;
            let media = IngestLayout::new(req(&p.ingest)).articles();
            let s = stages::embed_stage(&req(&p.articles), &media, backend.as_ref(), &req(&p.embeddings))?;
            Ok(to_value(&s))
        }
        Stage::Cluster => {
            let header = req(&p.embeddings).join(format!("{}.json", stages::EMBEDDING_STEM));
            Ok(to_value(&stages::cluster_stage(&header, &cfg.cluster, &req(&p.clusters))?))
        }
        Stage::AnnotateExport => {
            let m = stages::annotate_export(
                &req(&p.clusters),
                &taxonomy(cfg)?,
                cfg.annotate.sample_size,
                cfg.annotate.seed,
                &req(&p.annotate),
            )?;
            Ok(json!({"clusters": m.len(), "sampled": m.iter().map(|c| c.image_keys.len()).sum::<usize>()}))
        }
        Stage::Resolve => {
            let assignments = req(&p.clusters).join("assignments.csv");
            let s = stages::resolve_stage(&req(&p.annotations), &taxonomy(cfg)?, Some(&assignments), &req(&p.labels))?;
            Ok(to_value(&s))
        }
        Stage::Serialize => {
            let inputs = SerializeInputs {
                articles: req(&p.articles),
                media: IngestLayout::new(req(&p.ingest)).articles(),
                assignments: cfg.serialize.labels.then(|| req(&p.clusters).join("assignments.csv")),
                resolved: cfg.serialize.labels.then(|| req(&p.labels).join(stages::RESOLVED_FILE)),
                embeddings: cfg
                    .serialize
                    .features
                    .then(|| req(&p.embeddings).join(format!("{}.json", stages::EMBEDDING_STEM))),
            };
            let (s, _) = stages::serialize_stage(&inputs, &cfg.serialize.options, &req(&p.shards))?;
            Ok(to_value(&s))
        }
        Stage::Eval => {
            let out = req(&p.eval);
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let header = req(&p.embeddings).join(format!("{}.json", stages::EMBEDDING_STEM));
            let (images, _) = load_embeddings(&header)?;
            let boot = BootstrapConfig {
                resamples: cfg.eval.bootstrap,
                level: cfg.eval.level,
                seed: cfg.eval.seed,
            };
            let task_path = req(&p.eval_task);
            let texts_needed: Vec<String>;
            let result = match cfg.eval.kind {
                EvalKind::Classify => {
                    let task: TaskSpec = evalio::read_task(&task_path)?;
                    texts_needed = task.classes.iter().flat_map(|c| c.captions.clone()).collect();
                    let texts = text_embeddings(cfg, &texts_needed, &out)?;
                    to_value(&evalio::classify(&task, &images, &texts, &boot)?)
                }
                EvalKind::Retrieve => {
                    let task: RetrievalTask = evalio::read_task(&task_path)?;
                    texts_needed = task.pairs.iter().map(|p| p.caption.clone()).collect();
                    let texts = text_embeddings(cfg, &texts_needed, &out)?;
                    to_value(&evalio::retrieve(&task, &images, &texts, &cfg.eval.ks, &boot)?)
                }
            };
            evalio::write_result(&result, &out.join("results.json"))?;
            Ok(result)
        }
    }
}

/// Loads the configured text embeddings, or embeds the texts with the
/// pipeline's backend and saves them next to the results.
fn text_embeddings(
    cfg: &PipelineConfig,
    texts: &[String],
    out: &Path,
) -> Result<crate::embed::EmbeddingMatrix, StageError> {
    if let Some(p) = &cfg.paths.eval_text_embeddings {
        return Ok(load_embeddings(p)?.0);
    }
    let backend = cfg.embed.backend().map_err(|e| StageError::Invalid(format!("embedding backend: {e}")))?;
    let m = stages::embed_texts(texts, backend.as_ref())?;
    save_embeddings(&m, &[], out, "texts")?;
    Ok(m)
}
