//! PCA + k-means over-clustering of embeddings, the assignment cache, and
//! per-cluster sampling for review.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use litfig_core::kmeans::{kmeans, nearest_centroid, KMeansConfig, KMeansError};
use litfig_core::linalg::Matrix;
use litfig_core::pca::{fit_pca, PcaError, PcaModel};
use litfig_core::subset::{group_seed, sample_without_replacement};
use litfig_core::vote::ClusterId;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::fsutil::{read_json, write_atomic, write_json_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub k: usize,
    pub seed: u64,
    pub variance_target: f64,
    pub max_components: Option<usize>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: 20,
            seed: 0,
            variance_target: 0.99,
            max_components: Some(25),
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub params: ClusterParams,
    pub pca: PcaModel,
    /// `k` rows in the PCA space.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub assignments: BTreeMap<String, ClusterId>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// Fits PCA to the variance target, then k-means in the reduced space.
pub fn fit_clusters(emb: &EmbeddingMatrix, params: &ClusterParams) -> Result<ClusterModel, ClusterError> {
    let x = emb.to_matrix();
    let pca = fit_pca(&x, params.variance_target, params.max_components)?;
    let reduced = pca.project(&x)?;
    let cfg = KMeansConfig {
        k: params.k,
        seed: params.seed,
        max_iters: params.max_iters,
        tol: params.tol,
    };
    let result = kmeans(&reduced, &cfg)?;
    let assignments = emb
        .row_keys
        .iter()
        .zip(&result.assignments)
        .map(|(k, &c)| (k.clone(), c as ClusterId))
        .collect();
    Ok(ClusterModel {
        params: params.clone(),
        pca,
        centroids: result.centroids.iter_rows().map(<[f64]>::to_vec).collect(),
        inertia: result.inertia,
        iterations: result.iterations,
        converged: result.converged,
        assignments,
    })
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Cluster of a new embedding: nearest centroid after projection.
    pub fn assign(&self, embedding: &[f64]) -> Result<ClusterId, ClusterError> {
        let x = Matrix::from_rows(&[embedding]);
        let p = self.pca.project(&x)?;
        let centroids = Matrix::from_rows(&self.centroids);
        Ok(nearest_centroid(&centroids, p.row(0)) as ClusterId)
    }

    pub fn members(&self, cluster: ClusterId) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn sizes(&self) -> BTreeMap<ClusterId, usize> {
        let mut sizes: BTreeMap<ClusterId, usize> = (0..self.k() as ClusterId).map(|c| (c, 0)).collect();
        for c in self.assignments.values() {
            *sizes.entry(*c).or_default() += 1;
        }
        sizes
    }

    /// Model JSON plus the `image_key,cluster_id` cache.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        write_json_atomic(&dir.join("cluster_model.json"), self)?;
        save_assignments(&self.assignments, &dir.join("assignments.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self, ClusterError> {
        let path = dir.join("cluster_model.json");
        let mut m: ClusterModel = read_json(&path).map_err(|e| ClusterError::File {
            path: path.clone(),
            message: e.to_string(),
        })?;
        m.assignments = load_assignments(&dir.join("assignments.csv"))?;
        Ok(m)
    }
}

/// Up to `n` members of `cluster`, uniformly without replacement and
/// deterministic in `seed`. Keys come back in sorted order.
pub fn sample_cluster(
    model: &ClusterModel,
    cluster: ClusterId,
    n: usize,
    seed: u64,
) -> Result<Vec<String>, ClusterError> {
    if cluster as usize >= model.k() {
        return Err(ClusterError::UnknownCluster(cluster));
    }
    let members = model.members(cluster);
    Ok(sample_without_replacement(&members, n, group_seed(seed, &cluster.to_string())))
}

pub fn save_assignments(assignments: &BTreeMap<String, ClusterId>, path: &Path) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_key", "cluster_id"]).map_err(io::Error::other)?;
    for (k, c) in assignments {
        w.write_record([k.as_str(), &c.to_string()]).map_err(io::Error::other)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn load_assignments(path: &Path) -> Result<BTreeMap<String, ClusterId>, ClusterError> {
    let err = |message: String| ClusterError::File {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let key = rec.get(0).unwrap_or("").to_string();
        let cluster = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| err(format!("bad cluster id in row for {key:?}")))?;
        if out.insert(key.clone(), cluster).is_some() {
            return Err(err(format!("image key {key:?} assigned twice")));
        }
    }
    Ok(out)
}
