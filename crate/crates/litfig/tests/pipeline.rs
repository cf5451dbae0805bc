use std::path::Path;
use std::process::Command;

use litfig::demo::{demo_config, run_demo};
use litfig::entrez::MockService;
use litfig::fixtures::{canned_records, demo_articles, write_mirror};
use litfig::pipeline::{run, Overrides, PipelineError, Stage, StageStatus};
use serde_json::Value;

fn marker_summary(work: &Path, stage: &str) -> Value {
    let v: Value = serde_json::from_slice(&std::fs::read(work.join(".markers").join(format!("{stage}.json"))).unwrap()).unwrap();
    v["summary"].clone()
}

fn n(v: &Value) -> u64 {
    v.as_u64().unwrap()
}

#[test]
fn full_reruns_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_demo(a.path()).unwrap();
    let rb = run_demo(b.path()).unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&ra.manifest_path), read(&rb.manifest_path));
    let shards = |root: &Path| root.join("work/shards");
    for name in ["data-000000.tar", "data-000001.tar", "data-000002.tar", "metadata.lfcol"] {
        assert_eq!(read(&shards(a.path()).join(name)), read(&shards(b.path()).join(name)), "{name}");
    }
    assert_eq!(read(&a.path().join("work/labels/resolved.jsonl")), read(&b.path().join("work/labels/resolved.jsonl")));
}

#[test]
fn stage_summaries_conserve_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_demo(dir.path()).unwrap();
    let work = &out.work_dir;

    let s = marker_summary(work, "ingest");
    assert_eq!(n(&s["entries"]), n(&s["ok"]) + n(&s["failed"]) + n(&s["skipped"]));
    let s = marker_summary(work, "extract");
    assert_eq!(n(&s["articles_in"]), n(&s["articles_written"]) + n(&s["articles_skipped"]));
    let s = marker_summary(work, "embed");
    assert_eq!(n(&s["images_in"]), n(&s["rows"]) + n(&s["skipped"]));
    let s = marker_summary(work, "serialize");
    assert_eq!(n(&s["figures_in"]), n(&s["denormalized"]) + n(&s["skipped_missing"]));
    let sub = &s["subset"];
    assert_eq!(n(&s["denormalized"]) - n(&s["duplicates_removed"]), n(&sub["input"]));
    assert_eq!(n(&sub["input"]), n(&sub["kept"]) + n(&sub["dropped"]) + n(&sub["unlabeled"]));
    assert_eq!(n(&sub["kept"]), n(&s["samples_written"]));
    assert_eq!(n(&s["samples_written"]), 7);
}

#[test]
fn missing_prerequisite_is_reported_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path());
    let err = run(&cfg, &[Stage::Store], Overrides::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingPrerequisite { stage: Stage::Store, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("work/articles").exists());
}

#[test]
fn changed_upstream_output_is_stale_until_rerun() {
    let dir = tempfile::tempdir().unwrap();
    write_mirror(&dir.path().join("mirror"), &demo_articles()).unwrap();
    let cfg = demo_config(dir.path());
    let service = MockService::new(canned_records(&demo_articles()));
    let over = Overrides {
        transport: None,
        service: Some(&service),
    };
    let early = [Stage::Ingest, Stage::Extract, Stage::Enrich, Stage::Store, Stage::Embed, Stage::Cluster];
    run(&cfg, &early, over).unwrap();

    let keys = dir.path().join("work/embeddings/images.keys");
    let mut text = std::fs::read_to_string(&keys).unwrap();
    text.push('\n');
    std::fs::write(&keys, text).unwrap();
    let err = run(&cfg, &[Stage::Cluster], over).unwrap_err();
    assert!(
        matches!(err, PipelineError::StaleInput { stage: Stage::Cluster, prerequisite: Stage::Embed }),
        "{err}"
    );
    assert_eq!(err.exit_code(), 2);

    let report = run(&cfg, &[Stage::Embed, Stage::Cluster], over).unwrap();
    assert!(report.ok);
    // Embed restores identical bytes, so cluster's input matches its marker.
    assert_eq!(report.stages[0].status, StageStatus::Ok);
    assert_eq!(report.stages[1].status, StageStatus::Skipped);
    let again = run(&cfg, &early, over).unwrap();
    assert!(again.stages.iter().all(|s| s.status == StageStatus::Skipped));
}

#[test]
fn settings_change_reruns_only_that_stage() {
    let dir = tempfile::tempdir().unwrap();
    run_demo(dir.path()).unwrap();
    let mut cfg = demo_config(dir.path());
    cfg.serialize.options.shard_size = 2;
    let report = run(&cfg, &[Stage::Serialize], Overrides::default()).unwrap();
    assert_eq!(report.stages[0].status, StageStatus::Ok);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("work/shards/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["shards"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["total_samples"], 7);
}

fn litfig() -> Command {
    Command::new(env!("CARGO_BIN_EXE_litfig"))
}

#[test]
fn cli_pipeline_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mirror = dir.path().join("mirror");
    write_mirror(&mirror, &demo_articles()).unwrap();
    let config = dir.path().join("pipeline.toml");
    std::fs::write(
        &config,
        "[paths]\nwork_dir = \"work\"\nfile_list = \"mirror/oa_file_list.csv\"\nmirror = \"mirror\"\n\
         ingest = \"work/ingest\"\nextracted = \"work/extracted\"\nenriched = \"work/enriched\"\narticles = \"work/articles\"\n\n[embed]\nbackend = \"hash\"\ndim = 16\n",
    )
    .unwrap();
    let status = litfig()
        .args(["pipeline", "run", "--config"])
        .arg(&config)
        .args(["--stages", "ingest,extract"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("work/extracted/articles-00000.jsonl").exists());
    assert!(dir.path().join("work/run-report.json").exists());

    let status = litfig()
        .args(["pipeline", "run", "--config"])
        .arg(&config)
        .args(["--stages", "store"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    std::fs::write(&config, "[paths]\nwork_dri = \"work\"\n").unwrap();
    let status = litfig().args(["pipeline", "run", "--config"]).arg(&config).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn cli_demo_then_query_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let out = litfig().args(["demo", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let shards = dir.path().join("work/shards");

    let out = litfig()
        .args(["query", "--columnar"])
        .arg(shards.join("metadata.lfcol"))
        .args(["--where", "article_license.group = 'commercial'", "--count"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "3");

    let out = litfig()
        .args(["stream", "--manifest"])
        .arg(shards.join("manifest.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0]["key"], "PMC1001_cells-1");

    let out = litfig()
        .args(["stream", "--manifest"])
        .arg(shards.join("manifest.json"))
        .args(["--from-shard", "2"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn documented_config_example_parses() {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/schema.md")).unwrap();
    let block = doc.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.toml");
    std::fs::write(&path, block).unwrap();
    let cfg = litfig::pipeline::PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.cluster.k, 20);
    assert_eq!(cfg.serialize.options.shard_size, 10_000);
    assert_eq!(cfg.paths.work_dir.unwrap(), dir.path().join("work"));
}
