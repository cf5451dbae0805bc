//! Runs the whole pipeline over the built-in fixture corpus: a local mirror,
//! a canned metadata service, the hash embedding backend and scripted
//! annotations.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::cluster::ClusterParams;
use crate::entrez::MockService;
use crate::evalio::{TaskClass, TaskItem, TaskSpec};
use crate::fixtures::{canned_records, demo_articles, scripted_annotations, write_mirror};
use crate::fsutil::write_json_atomic;
use crate::labels::AnnotationLog;
use crate::pipeline::{run, EmbedConfig, Overrides, PathsConfig, PipelineConfig, PipelineError, RunReport, Stage};
use crate::samples::sample_key;
use crate::shards::{stream_shards, ShardManifest, ShardSource};
use crate::store::read_articles;

pub const DEMO_K: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct DemoOutcome {
    pub work_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub runs: Vec<RunReport>,
    pub total_samples: usize,
    pub streamed: usize,
}

/// Config for the demo corpus rooted at `dir`.
pub fn demo_config(dir: &Path) -> PipelineConfig {
    let work = dir.join("work");
    let p = |name: &str| Some(work.join(name));
    let mut cfg = PipelineConfig {
        paths: PathsConfig {
            work_dir: Some(work.clone()),
            file_list: Some(dir.join("mirror").join("oa_file_list.csv")),
            mirror: Some(dir.join("mirror").to_string_lossy().into_owned()),
            ingest: p("ingest"),
            extracted: p("extracted"),
            enriched: p("enriched"),
            articles: p("articles"),
            embeddings: p("embeddings"),
            clusters: p("clusters"),
            annotate: p("annotate"),
            annotations: p("annotations.jsonl"),
            taxonomy: None,
            labels: p("labels"),
            shards: p("shards"),
            eval_task: p("eval-task.json"),
            eval_text_embeddings: None,
            eval: p("eval"),
        },
        embed: EmbedConfig::Hash { dim: 32 },
        cluster: ClusterParams {
            k: DEMO_K,
            seed: 7,
            ..ClusterParams::default()
        },
        ..PipelineConfig::default()
    };
    cfg.serialize.options.shard_size = 3;
    cfg.serialize.options.workers = 2;
    cfg
}

/// A classification task over the embedded figures: the class is the
/// article's license group.
pub fn license_task(articles_dir: &Path) -> std::io::Result<TaskSpec> {
    let articles = read_articles(articles_dir)?;
    let mut items = Vec::new();
    for a in &articles {
        for f in a.figure_set.iter().filter(|f| !f.missing) {
            items.push(TaskItem {
                image_key: sample_key(&a.accession_id, &f.image_id),
                class: a.license_group.to_string(),
            });
        }
    }
    let class = |label: &str| TaskClass {
        label: label.into(),
        captions: vec![format!("a figure from a {label} article"), format!("{label} license")],
    };
    Ok(TaskSpec {
        task_name: "license-group".into(),
        classes: vec![class("commercial"), class("noncommercial"), class("other")],
        items,
    })
}

/// Writes the mirror under `dir` (if absent) and runs every stage. The
/// scripted annotations go into the log before `resolve` when the log does
/// not exist yet.
pub fn run_demo(dir: &Path) -> Result<DemoOutcome, PipelineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    let articles = demo_articles();
    let mirror = dir.join("mirror");
    if !mirror.join("oa_file_list.csv").exists() {
        write_mirror(&mirror, &articles).map_err(io(&mirror))?;
    }
    let cfg = demo_config(dir);
    let service = MockService::new(canned_records(&articles));
    let over = Overrides {
        transport: None,
        service: Some(&service),
    };
    let mut runs = Vec::new();
    runs.push(run(
        &cfg,
        &[
            Stage::Ingest,
            Stage::Extract,
            Stage::Enrich,
            Stage::Store,
            Stage::Embed,
            Stage::Cluster,
            Stage::AnnotateExport,
        ],
        over,
    )?);

    let log_path = cfg.paths.annotations.clone().expect("demo config sets it");
    if !log_path.exists() {
        let log = AnnotationLog::open(&log_path).map_err(io(&log_path))?;
        for a in scripted_annotations(DEMO_K) {
            log.append(&a).map_err(io(&log_path))?;
        }
    }
    let task_path = cfg.paths.eval_task.clone().expect("demo config sets it");
    let articles_dir = cfg.paths.articles.clone().expect("demo config sets it");
    let task = license_task(&articles_dir).map_err(io(&articles_dir))?;
    write_json_atomic(&task_path, &json!(task)).map_err(io(&task_path))?;
    runs.push(run(&cfg, &[Stage::Resolve, Stage::Serialize, Stage::Eval], over)?);

    let shards = cfg.paths.shards.clone().expect("demo config sets it");
    let manifest_path = shards.join(crate::shards::MANIFEST_FILE);
    let stream_err = |e: crate::shards::ShardError| PipelineError::Stage {
        stage: Stage::Serialize,
        source: e.into(),
    };
    let manifest = ShardManifest::load(&manifest_path).map_err(stream_err)?;
    let mut streamed = 0;
    for s in stream_shards(&ShardSource::Manifest(manifest_path.clone())).map_err(stream_err)? {
        s.map_err(stream_err)?;
        streamed += 1;
    }
    Ok(DemoOutcome {
        work_dir: cfg.paths.work_dir.clone().expect("demo config sets it"),
        manifest_path,
        runs,
        total_samples: manifest.total_samples,
        streamed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::StageStatus;

    #[test]
    fn demo_runs_then_skips() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_demo(dir.path()).unwrap();
        assert_eq!(out.total_samples, 7);
        assert_eq!(out.streamed, 7);
        assert!(out.runs.iter().flat_map(|r| &r.stages).all(|s| s.status == StageStatus::Ok));
        let again = run_demo(dir.path()).unwrap();
        assert!(again.runs.iter().flat_map(|r| &r.stages).all(|s| s.status == StageStatus::Skipped));
    }
}
