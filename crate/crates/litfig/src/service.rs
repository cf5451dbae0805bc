//! HTTP annotation service over a fitted cluster model.
//!
//! Submissions land in an append-only JSONL log that is synced before the
//! response is sent.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use litfig_core::taxonomy::Taxonomy;
use litfig_core::vote::{ClusterAnnotation, ClusterId, FieldError, PanelType};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use time::format_description::well_known::Rfc3339;

use crate::cluster::{sample_cluster, ClusterModel};
use crate::labels::{read_annotation_log, taxonomy_to_json, AnnotationLog};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Images per montage.
    pub sample_size: usize,
    pub seed: u64,
    pub max_annotators_per_cluster: Option<usize>,
    pub max_clusters_per_annotator: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            sample_size: 30,
            seed: 0,
            max_annotators_per_cluster: None,
            max_clusters_per_annotator: None,
        }
    }
}

pub struct AppState {
    model: ClusterModel,
    taxonomy: Taxonomy,
    images: BTreeMap<String, PathBuf>,
    config: ServiceConfig,
    log: AnnotationLog,
    /// Current annotation per (cluster, annotator).
    current: Mutex<BTreeMap<(ClusterId, String), ClusterAnnotation>>,
}

impl AppState {
    /// Opens (or creates) the log at `log_path` and replays it.
    pub fn open(
        model: ClusterModel,
        taxonomy: Taxonomy,
        images: BTreeMap<String, PathBuf>,
        log_path: &Path,
        config: ServiceConfig,
    ) -> io::Result<Self> {
        let mut current = BTreeMap::new();
        for a in read_annotation_log(log_path)? {
            current.insert((a.cluster_id, a.annotator_id.clone()), a);
        }
        Ok(Self {
            model,
            taxonomy,
            images,
            config,
            log: AnnotationLog::open(log_path)?,
            current: Mutex::new(current),
        })
    }

    fn has_cluster(&self, id: ClusterId) -> bool {
        (id as usize) < self.model.k()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/clusters", get(list_clusters))
        .route("/clusters/{id}/sample", get(cluster_sample))
        .route("/clusters/{id}/annotations", get(cluster_annotations).post(submit))
        .route("/taxonomy", get(taxonomy))
        .route("/images/{key}", get(image))
        .with_state(state)
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": kind, "message": message.into()}))).into_response()
}

fn unprocessable(errors: Vec<FieldError>) -> Response {
    (
        StatusCode::UNPROCESSABLE_ENTITY,
        Json(json!({"error": "invalid_annotation", "fields": errors})),
    )
        .into_response()
}

fn cluster_param(raw: &str, state: &AppState) -> Result<ClusterId, Response> {
    raw.parse::<ClusterId>()
        .ok()
        .filter(|&id| state.has_cluster(id))
        .ok_or_else(|| error(StatusCode::NOT_FOUND, "unknown_cluster", format!("no cluster {raw:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProgress {
    pub cluster_id: ClusterId,
    pub size: usize,
    pub annotation_count: usize,
    pub annotators: Vec<String>,
}

fn progress(state: &AppState) -> Vec<ClusterProgress> {
    let sizes = state.model.sizes();
    let current = state.current.lock().expect("annotation state poisoned");
    let mut by_cluster: BTreeMap<ClusterId, Vec<String>> = BTreeMap::new();
    for (c, who) in current.keys() {
        by_cluster.entry(*c).or_default().push(who.clone());
    }
    sizes
        .into_iter()
        .map(|(c, size)| {
            let annotators = by_cluster.remove(&c).unwrap_or_default();
            ClusterProgress {
                cluster_id: c,
                size,
                annotation_count: annotators.len(),
                annotators,
            }
        })
        .collect()
}

async fn list_clusters(State(state): State<Arc<AppState>>) -> Response {
    let clusters = progress(&state);
    let done = clusters.iter().filter(|c| c.annotation_count > 0).count();
    Json(json!({
        "clusters": clusters,
        "annotated_clusters": done,
        "total_clusters": state.model.k(),
        "limits": {
            "max_annotators_per_cluster": state.config.max_annotators_per_cluster,
            "max_clusters_per_annotator": state.config.max_clusters_per_annotator,
        },
    }))
    .into_response()
}

#[derive(Debug, Deserialize)]
struct SampleQuery {
    n: Option<usize>,
    seed: Option<u64>,
}

/// The three form questions with their answer options.
pub fn form_questions(taxonomy: &Taxonomy) -> Value {
    let panels: Vec<Value> = PanelType::ALL
        .iter()
        .map(|p| json!({"value": p.as_str(), "label": p.description()}))
        .collect();
    let globals: Vec<&str> = taxonomy.globals().collect();
    let locals: BTreeSet<&str> = taxonomy
        .entries()
        .iter()
        .flat_map(|(_, l)| l.iter().map(String::as_str))
        .collect();
    json!([
        {"id": "panel_type", "prompt": "Are these single panel or multiple panel images?", "kind": "single_choice", "options": panels},
        {"id": "global_labels", "prompt": "Which global concepts describe the images?", "kind": "multi_choice", "options": globals},
        {"id": "local_labels", "prompt": "Which local concepts describe the images?", "kind": "free_text_list", "suggestions": locals},
    ])
}

async fn cluster_sample(
    State(state): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
    Query(q): Query<SampleQuery>,
) -> Response {
    let id = match cluster_param(&raw, &state) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let n = q.n.unwrap_or(state.config.sample_size);
    let keys = match sample_cluster(&state.model, id, n, q.seed.unwrap_or(state.config.seed)) {
        Ok(k) => k,
        Err(e) => return error(StatusCode::NOT_FOUND, "unknown_cluster", e.to_string()),
    };
    let images: Vec<Value> = keys
        .iter()
        .map(|k| json!({"image_key": k, "url": format!("/images/{k}")}))
        .collect();
    Json(json!({
        "cluster_id": id,
        "size": state.model.sizes().get(&id).copied().unwrap_or(0),
        "images": images,
        "questions": form_questions(&state.taxonomy),
        "taxonomy": taxonomy_to_json(&state.taxonomy),
    }))
    .into_response()
}

async fn cluster_annotations(State(state): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>) -> Response {
    let id = match cluster_param(&raw, &state) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let current = state.current.lock().expect("annotation state poisoned");
    let list: Vec<&ClusterAnnotation> = current.range((id, String::new())..).take_while(|((c, _), _)| *c == id).map(|(_, a)| a).collect();
    Json(json!({"cluster_id": id, "annotations": list})).into_response()
}

fn string_list(body: &Value, field: &str, required: bool, errors: &mut Vec<FieldError>) -> Vec<String> {
    match body.get(field) {
        None | Some(Value::Null) if !required => Vec::new(),
        None | Some(Value::Null) => {
            errors.push(field_error(field, "is required"));
            Vec::new()
        }
        Some(Value::Array(items)) => {
            let out: Vec<String> = items.iter().filter_map(|v| v.as_str().map(str::to_string)).collect();
            if out.len() != items.len() {
                errors.push(field_error(field, "must be a list of strings"));
            }
            out
        }
        Some(_) => {
            errors.push(field_error(field, "must be a list of strings"));
            Vec::new()
        }
    }
}

fn field_error(field: &str, message: &str) -> FieldError {
    FieldError {
        field: field.to_string(),
        message: message.to_string(),
    }
}

/// Builds an annotation from a request body, collecting every problem as a
/// field error. The server stamps `submitted_at`.
pub fn parse_submission(
    body: &[u8],
    cluster: ClusterId,
    header_annotator: Option<&str>,
    taxonomy: &Taxonomy,
) -> Result<ClusterAnnotation, Vec<FieldError>> {
    let body: Value = serde_json::from_slice(body).map_err(|e| vec![field_error("body", &format!("invalid JSON: {e}"))])?;
    if !body.is_object() {
        return Err(vec![field_error("body", "must be a JSON object")]);
    }
    let mut errors = Vec::new();
    let annotator_id = match (body.get("annotator_id"), header_annotator) {
        (Some(Value::String(s)), _) => s.clone(),
        (None | Some(Value::Null), Some(h)) => h.to_string(),
        (None | Some(Value::Null), None) => {
            errors.push(field_error("annotator_id", "is required"));
            String::new()
        }
        (Some(_), _) => {
            errors.push(field_error("annotator_id", "must be a string"));
            String::new()
        }
    };
    match body.get("cluster_id") {
        None | Some(Value::Null) => {}
        Some(v) if v.as_u64() == Some(cluster as u64) => {}
        Some(_) => errors.push(field_error("cluster_id", "does not match the cluster in the URL")),
    }
    let panel_type = match body.get("panel_type") {
        Some(Value::String(s)) => PanelType::parse(s).or_else(|| {
            errors.push(field_error("panel_type", &format!("unknown panel type {s:?}")));
            None
        }),
        None | Some(Value::Null) => {
            errors.push(field_error("panel_type", "is required"));
            None
        }
        Some(_) => {
            errors.push(field_error("panel_type", "must be a string"));
            None
        }
    };
    let global_labels = string_list(&body, "global_labels", true, &mut errors);
    let local_labels = string_list(&body, "local_labels", false, &mut errors);
    for g in &global_labels {
        if !g.trim().is_empty() && taxonomy.canonical_global(g).is_none() {
            errors.push(field_error("global_labels", &format!("{g:?} is not a global concept")));
        }
    }
    let ann = ClusterAnnotation {
        annotator_id,
        cluster_id: cluster,
        panel_type: panel_type.unwrap_or(PanelType::Single),
        global_labels,
        local_labels,
        submitted_at: String::new(),
    };
    if let Err(more) = ann.validate() {
        for e in more {
            if !errors.iter().any(|x| x.field == e.field) {
                errors.push(e);
            }
        }
    }
    if errors.is_empty() {
        Ok(ann)
    } else {
        Err(errors)
    }
}

#[derive(Debug, Deserialize)]
struct SubmitQuery {
    #[serde(default)]
    replace: bool,
}

fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

async fn submit(
    State(state): State<Arc<AppState>>,
    UrlPath(raw): UrlPath<String>,
    Query(q): Query<SubmitQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let id = match cluster_param(&raw, &state) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let header_annotator = headers.get(ANNOTATOR_HEADER).and_then(|v| v.to_str().ok());
    let mut ann = match parse_submission(&body, id, header_annotator, &state.taxonomy) {
        Ok(a) => a,
        Err(errors) => return unprocessable(errors),
    };
    ann.submitted_at = now_rfc3339();
    let state2 = state.clone();
    let outcome = tokio::task::spawn_blocking(move || record(&state2, ann, q.replace)).await;
    match outcome {
        Ok(Ok((ann, replaced, count))) => (
            StatusCode::OK,
            Json(json!({"status": if replaced {"replaced"} else {"created"}, "annotation": ann, "annotation_count": count})),
        )
            .into_response(),
        Ok(Err(r)) => r,
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

/// Checks duplicates and limits, then appends under the state lock so log
/// order matches acceptance order.
fn record(state: &AppState, ann: ClusterAnnotation, replace: bool) -> Result<(ClusterAnnotation, bool, usize), Response> {
    let mut current = state.current.lock().expect("annotation state poisoned");
    let key = (ann.cluster_id, ann.annotator_id.clone());
    let exists = current.contains_key(&key);
    if exists && !replace {
        return Err(error(
            StatusCode::CONFLICT,
            "duplicate",
            format!("{} already annotated cluster {}; resubmit with ?replace=true", ann.annotator_id, ann.cluster_id),
        ));
    }
    if !exists {
        let in_cluster = current.keys().filter(|(c, _)| *c == ann.cluster_id).count();
        if state.config.max_annotators_per_cluster.is_some_and(|m| in_cluster >= m) {
            return Err(error(StatusCode::CONFLICT, "limit", "cluster has its maximum number of annotators"));
        }
        let by_annotator = current.keys().filter(|(_, w)| *w == ann.annotator_id).count();
        if state.config.max_clusters_per_annotator.is_some_and(|m| by_annotator >= m) {
            return Err(error(StatusCode::CONFLICT, "limit", "annotator has reached the cluster limit"));
        }
    }
    if let Err(e) = state.log.append(&ann) {
        return Err(error(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string()));
    }
    current.insert(key, ann.clone());
    let count = current.keys().filter(|(c, _)| *c == ann.cluster_id).count();
    Ok((ann, exists, count))
}

async fn taxonomy(State(state): State<Arc<AppState>>) -> Response {
    Json(taxonomy_to_json(&state.taxonomy)).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("tif" | "tiff") => "image/tiff",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(key): UrlPath<String>) -> Response {
    let Some(path) = state.images.get(&key) else {
        return error(StatusCode::NOT_FOUND, "unknown_image", format!("no image {key:?}"));
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, "unknown_image", e.to_string()),
    }
}

/// A service running on its own runtime thread; dropping it shuts down.
pub struct RunningService {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<io::Result<()>>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.halt()
    }

    fn halt(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| io::Error::other("service thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        let _ = self.halt();
    }
}

/// Binds `addr` and serves in the background.
pub fn start(state: AppState, addr: SocketAddr) -> io::Result<RunningService> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(Arc::new(state));
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(RunningService {
        addr: bound,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves on the current thread until the process is stopped.
pub fn serve_forever(state: AppState, addr: SocketAddr) -> io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        axum::serve(listener, router(Arc::new(state))).await
    })
}
