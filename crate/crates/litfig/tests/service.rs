use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use litfig::cluster::{fit_clusters, ClusterParams};
use litfig::core::taxonomy::Taxonomy;
use litfig::embed::EmbeddingMatrix;
use litfig::labels::read_annotation_log;
use litfig::service::{start, AppState, RunningService, ServiceConfig};
use serde_json::{json, Value};

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, Vec<u8>) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_to_vec().unwrap())
}

fn post(url: &str, annotator: Option<&str>, body: &Value) -> (u16, Value) {
    let mut req = agent().post(url).content_type("application/json");
    if let Some(a) = annotator {
        req = req.header("X-Annotator-Id", a);
    }
    let mut r = req.send(body.to_string()).unwrap();
    let status = r.status().as_u16();
    (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    log: PathBuf,
    image: PathBuf,
    svc: RunningService,
}

fn launch(config: ServiceConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut values = Vec::new();
    let mut keys = Vec::new();
    for i in 0..30 {
        let c = (i % 3) as f32 * 10.0;
        values.extend([c + (i as f32) * 0.01, c - (i as f32) * 0.02, 1.0]);
        keys.push(format!("PMC{i:03}_f1"));
    }
    let emb = EmbeddingMatrix::new(3, values, keys.clone()).unwrap();
    let model = fit_clusters(
        &emb,
        &ClusterParams {
            k: 3,
            seed: 1,
            ..ClusterParams::default()
        },
    )
    .unwrap();
    let image = dir.path().join("one.jpg");
    std::fs::write(&image, b"\xFF\xD8not really a jpeg").unwrap();
    let images: BTreeMap<String, PathBuf> = [(keys[0].clone(), image.clone())].into();
    let log = dir.path().join("annotations.jsonl");
    let state = AppState::open(model, Taxonomy::builtin(), images, &log, config).unwrap();
    let svc = start(state, SocketAddr::from(([127, 0, 0, 1], 0))).unwrap();
    Fixture {
        _dir: dir,
        log,
        image,
        svc,
    }
}

fn answer(annotator: Option<&str>) -> Value {
    let mut v = json!({"panel_type": "single", "global_labels": ["Microscopy"], "local_labels": ["  confocal microscopy "]});
    if let Some(a) = annotator {
        v["annotator_id"] = json!(a);
    }
    v
}

fn log_len(path: &Path) -> usize {
    read_annotation_log(path).unwrap().len()
}

#[test]
fn unknown_clusters_and_images_are_404() {
    let f = launch(ServiceConfig::default());
    let base = f.svc.url();
    assert_eq!(get(&format!("{base}/clusters/3/sample")).0, 404);
    assert_eq!(get(&format!("{base}/clusters/abc/annotations")).0, 404);
    assert_eq!(post(&format!("{base}/clusters/7/annotations"), None, &answer(Some("a"))).0, 404);
    assert_eq!(get(&format!("{base}/images/nope")).0, 404);
    let (status, bytes) = get(&format!("{base}/images/PMC000_f1"));
    assert_eq!(status, 200);
    assert_eq!(bytes, std::fs::read(&f.image).unwrap());
}

#[test]
fn sample_lists_images_and_questions() {
    let f = launch(ServiceConfig::default());
    let (status, body) = get(&format!("{}/clusters/0/sample?n=4&seed=2", f.svc.url()));
    assert_eq!(status, 200);
    let v = json_of(&body);
    assert_eq!(v["size"], 10);
    assert_eq!(v["images"].as_array().unwrap().len(), 4);
    assert_eq!(v["questions"].as_array().unwrap().len(), 3);
    let again = json_of(&get(&format!("{}/clusters/0/sample?n=4&seed=2", f.svc.url())).1);
    assert_eq!(v["images"], again["images"]);
    let (status, tax) = get(&format!("{}/taxonomy", f.svc.url()));
    assert_eq!(status, 200);
    assert!(!json_of(&tax).is_null());
}

#[test]
fn invalid_bodies_are_422_with_field_errors() {
    let f = launch(ServiceConfig::default());
    let url = format!("{}/clusters/1/annotations", f.svc.url());
    let (status, v) = post(&url, None, &json!({"panel_type": "triple", "global_labels": []}));
    assert_eq!(status, 422);
    let fields: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"annotator_id"));
    assert!(fields.contains(&"panel_type"));
    assert!(fields.contains(&"global_labels"));
    let (status, _) = post(&url, Some("a"), &json!({"panel_type": "single", "global_labels": ["Not A Concept"]}));
    assert_eq!(status, 422);
    assert_eq!(log_len(&f.log), 0);
}

#[test]
fn duplicates_conflict_until_replaced() {
    let f = launch(ServiceConfig::default());
    let url = format!("{}/clusters/2/annotations", f.svc.url());
    let (status, v) = post(&url, Some("hdr"), &answer(None));
    assert_eq!(status, 200);
    assert_eq!(v["status"], "created");
    assert_eq!(v["annotation"]["annotator_id"], "hdr");
    // Labels are stored as typed.
    assert_eq!(v["annotation"]["local_labels"], json!(["  confocal microscopy "]));
    assert_eq!(post(&url, Some("hdr"), &answer(None)).0, 409);
    let (status, v) = post(&format!("{url}?replace=true"), Some("hdr"), &answer(None));
    assert_eq!(status, 200);
    assert_eq!(v["status"], "replaced");
    assert_eq!(v["annotation_count"], 1);
    assert_eq!(log_len(&f.log), 2);
    let listed = json_of(&get(&url).1);
    assert_eq!(listed["annotations"].as_array().unwrap().len(), 1);
}

#[test]
fn limits_answer_409() {
    let f = launch(ServiceConfig {
        max_annotators_per_cluster: Some(2),
        max_clusters_per_annotator: Some(2),
        ..ServiceConfig::default()
    });
    let url = |c: u32| format!("{}/clusters/{c}/annotations", f.svc.url());
    assert_eq!(post(&url(0), None, &answer(Some("a"))).0, 200);
    assert_eq!(post(&url(0), None, &answer(Some("b"))).0, 200);
    assert_eq!(post(&url(0), None, &answer(Some("c"))).0, 409);
    assert_eq!(post(&url(1), None, &answer(Some("a"))).0, 200);
    assert_eq!(post(&url(2), None, &answer(Some("a"))).0, 409);
    assert_eq!(log_len(&f.log), 3);
}

#[test]
fn concurrent_submissions_all_land_in_the_log() {
    let f = launch(ServiceConfig::default());
    let base = f.svc.url();
    std::thread::scope(|s| {
        for t in 0..12 {
            let base = base.clone();
            s.spawn(move || {
                for c in 0..3 {
                    let (status, _) = post(&format!("{base}/clusters/{c}/annotations"), None, &answer(Some(&format!("w{t}"))));
                    assert_eq!(status, 200);
                }
            });
        }
    });
    let log = read_annotation_log(&f.log).unwrap();
    assert_eq!(log.len(), 36);
    let mut by_cluster: BTreeMap<u32, usize> = BTreeMap::new();
    for a in &log {
        *by_cluster.entry(a.cluster_id).or_default() += 1;
    }
    let progress = json_of(&get(&format!("{base}/clusters")).1);
    for c in progress["clusters"].as_array().unwrap() {
        let id = c["cluster_id"].as_u64().unwrap() as u32;
        assert_eq!(c["annotation_count"].as_u64().unwrap() as usize, by_cluster[&id]);
    }
    assert_eq!(progress["annotated_clusters"], 3);
}

#[test]
fn restart_replays_the_log() {
    let f = launch(ServiceConfig::default());
    let url = format!("{}/clusters/0/annotations", f.svc.url());
    assert_eq!(post(&url, None, &answer(Some("a"))).0, 200);
    let Fixture { _dir, log, svc, .. } = f;
    svc.stop().unwrap();

    let emb = EmbeddingMatrix::new(1, (0..6).map(|i| i as f32).collect(), (0..6).map(|i| format!("k{i}")).collect()).unwrap();
    let model = fit_clusters(
        &emb,
        &ClusterParams {
            k: 2,
            seed: 0,
            ..ClusterParams::default()
        },
    )
    .unwrap();
    let state = AppState::open(model, Taxonomy::builtin(), BTreeMap::new(), &log, ServiceConfig::default()).unwrap();
    let svc = start(state, SocketAddr::from(([127, 0, 0, 1], 0))).unwrap();
    let url = format!("{}/clusters/0/annotations", svc.url());
    assert_eq!(post(&url, None, &answer(Some("a"))).0, 409);
}
