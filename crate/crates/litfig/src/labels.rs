//! Label files: the taxonomy JSON, the append-only annotation log, resolved
//! labels and the review queue.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use litfig_core::taxonomy::{Taxonomy, TaxonomyError};
use litfig_core::vote::{
    disagreement_stats, resolve_cluster_with, ClusterAnnotation, ClusterId, DisagreementReport,
    ResolvedClusterLabels,
};
use serde_json::{Map, Value};

use crate::fsutil::{read_jsonl, to_jsonl, write_atomic};

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyFileError {
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: TaxonomyError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Taxonomy as a JSON object from global concept to its local concepts, in
/// the taxonomy's order.
pub fn taxonomy_to_json(t: &Taxonomy) -> Value {
    let mut map = Map::new();
    for (g, locals) in t.entries() {
        map.insert(g.clone(), Value::from(locals.clone()));
    }
    Value::Object(map)
}

pub fn taxonomy_from_json(value: &Value) -> Result<Taxonomy, Result<TaxonomyError, String>> {
    let obj = value.as_object().ok_or(Err("expected an object of global -> [local]".to_string()))?;
    let mut entries = Vec::new();
    for (g, locals) in obj {
        let list = locals
            .as_array()
            .ok_or_else(|| Err(format!("locals of {g:?} must be an array")))?
            .iter()
            .map(|l| l.as_str().map(str::to_string).ok_or_else(|| Err(format!("non-string local under {g:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        entries.push((g.clone(), list));
    }
    Taxonomy::new(entries).map_err(Ok)
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy, TaxonomyFileError> {
    let bytes = fs::read(path).map_err(|source| TaxonomyFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_slice(&bytes).map_err(|e| TaxonomyFileError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    taxonomy_from_json(&value).map_err(|e| match e {
        Ok(source) => TaxonomyFileError::Invalid {
            path: path.to_path_buf(),
            source,
        },
        Err(message) => TaxonomyFileError::Format {
            path: path.to_path_buf(),
            message,
        },
    })
}

pub fn write_taxonomy(t: &Taxonomy, path: &Path) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&taxonomy_to_json(t)).map_err(io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Append-only JSONL log of submitted annotations. Each append is flushed
/// and synced before it returns.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AnnotationLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, annotation: &ClusterAnnotation) -> io::Result<()> {
        let mut line = serde_json::to_vec(annotation).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().map_err(|_| io::Error::other("annotation log poisoned"))?;
        f.write_all(&line)?;
        f.sync_data()
    }
}

pub fn read_annotation_log(path: &Path) -> io::Result<Vec<ClusterAnnotation>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(path)
}

/// Current annotations grouped by cluster: a later record from the same
/// annotator for the same cluster replaces the earlier one.
pub fn effective_annotations(log: &[ClusterAnnotation]) -> BTreeMap<ClusterId, Vec<ClusterAnnotation>> {
    let mut latest: BTreeMap<(ClusterId, &str), (usize, &ClusterAnnotation)> = BTreeMap::new();
    for (i, a) in log.iter().enumerate() {
        latest.insert((a.cluster_id, a.annotator_id.as_str()), (i, a));
    }
    let mut groups: BTreeMap<ClusterId, Vec<(usize, ClusterAnnotation)>> = BTreeMap::new();
    for ((cluster, _), (i, a)) in latest {
        groups.entry(cluster).or_default().push((i, a.clone()));
    }
    groups
        .into_iter()
        .map(|(c, mut v)| {
            v.sort_by_key(|(i, _)| *i);
            (c, v.into_iter().map(|(_, a)| a).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub resolved: BTreeMap<ClusterId, ResolvedClusterLabels>,
    pub disagreement: DisagreementReport,
}

pub fn resolve_all(groups: &BTreeMap<ClusterId, Vec<ClusterAnnotation>>, taxonomy: &Taxonomy) -> Resolution {
    let resolved = groups
        .iter()
        .filter(|(_, anns)| !anns.is_empty())
        .map(|(&c, anns)| {
            let r = resolve_cluster_with(anns, taxonomy).expect("groups hold one non-empty cluster each");
            (c, r)
        })
        .collect();
    Resolution {
        resolved,
        disagreement: disagreement_stats(groups),
    }
}

pub fn write_resolved(resolved: &BTreeMap<ClusterId, ResolvedClusterLabels>, path: &Path) -> io::Result<()> {
    let rows: Vec<&ResolvedClusterLabels> = resolved.values().collect();
    write_atomic(path, &to_jsonl(&rows)?)
}

pub fn read_resolved(path: &Path) -> io::Result<BTreeMap<ClusterId, ResolvedClusterLabels>> {
    Ok(read_jsonl::<ResolvedClusterLabels>(path)?
        .into_iter()
        .map(|r| (r.cluster_id, r))
        .collect())
}

/// CSV of clusters flagged for re-evaluation, one row per cluster.
pub fn write_review_queue(resolved: &BTreeMap<ClusterId, ResolvedClusterLabels>, path: &Path) -> io::Result<usize> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "cluster_id",
        "annotator_count",
        "primary_global",
        "primary_local",
        "single_vote_panels",
        "single_vote_globals",
        "single_vote_locals",
        "unknown_concepts",
    ])
    .map_err(io::Error::other)?;
    let mut rows = 0;
    for r in resolved.values().filter(|r| r.needs_review) {
        w.write_record([
            r.cluster_id.to_string(),
            r.annotator_count.to_string(),
            r.primary_global.clone(),
            r.primary_local.clone(),
            r.panel_votes.singletons.join(";"),
            r.global_votes.singletons.join(";"),
            r.local_votes.singletons.join(";"),
            r.unknown_concepts.join(";"),
        ])
        .map_err(io::Error::other)?;
        rows += 1;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(rows)
}
