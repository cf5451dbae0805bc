//! Seeded k-means: k-means++ initialisation followed by Lloyd iterations.
//!
//! All reductions run in a fixed order, so a given `(data, k, seed)` always
//! produces bit-identical centroids and assignments.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KMeansError {
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("k-means needs at least k samples: n = {n}, k = {k}")]
    TooFewSamples { n: usize, k: usize },
    #[error("input contains a non-finite value at row {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Iteration stops once no centroid moves farther than this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k x dim`.
    pub centroids: Matrix,
    /// Cluster index of each input row.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every assignment step, ending with the final one.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.rows()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Index of the centroid closest to `point`; ties go to the lowest index.
pub fn nearest_centroid(centroids: &Matrix, point: &[f64]) -> usize {
    nearest(centroids, point).0
}

fn nearest(centroids: &Matrix, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans(x: &Matrix, config: &KMeansConfig) -> Result<KMeansResult, KMeansError> {
    let n = x.rows();
    let k = config.k;
    if k == 0 {
        return Err(KMeansError::ZeroClusters);
    }
    if n < k {
        return Err(KMeansError::TooFewSamples { n, k });
    }
    if let Some(row) = x.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(KMeansError::NonFinite(row));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = init_plus_plus(x, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut distances = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iters {
        iterations += 1;
        history.push(assign(x, &centroids, &mut assignments, &mut distances));

        let mut next = update_centroids(x, &assignments, k);
        reseed_empty(x, &mut next, &mut assignments, &mut distances, &centroids);

        let shift = centroids
            .iter_rows()
            .zip(next.iter_rows())
            .map(|(a, b)| squared_distance(a, b))
            .fold(0.0f64, f64::max);
        centroids = next;
        if libm::sqrt(shift) < config.tol {
            converged = true;
            break;
        }
    }
    let inertia = assign(x, &centroids, &mut assignments, &mut distances);
    history.push(inertia);

    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
        converged,
        inertia_history: history,
    })
}

fn init_plus_plus(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));

    let mut closest: Vec<f64> = x.iter_rows().map(|r| squared_distance(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`; fall back to the
            // last point with positive weight.
            chosen.unwrap_or_else(|| closest.iter().rposition(|d| *d > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, row) in x.iter_rows().enumerate() {
            let d = squared_distance(row, x.row(pick));
            if d < closest[i] {
                closest[i] = d;
            }
        }
    }
    centroids
}

fn assign(x: &Matrix, centroids: &Matrix, assignments: &mut [usize], distances: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        let (c, d) = nearest(centroids, row);
        assignments[i] = c;
        distances[i] = d;
        inertia += d;
    }
    inertia
}

fn update_centroids(x: &Matrix, assignments: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, x.cols());
    let mut counts = vec![0usize; k];
    for (row, &a) in x.iter_rows().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            for s in sums.row_mut(c) {
                *s /= count as f64;
            }
        } else {
            // Marks the row for reseeding.
            sums.row_mut(c).fill(f64::NAN);
        }
    }
    sums
}

/// Moves every empty centroid onto the point farthest from its current
/// centroid, taking points only from clusters that keep at least one member.
fn reseed_empty(
    x: &Matrix,
    next: &mut Matrix,
    assignments: &mut [usize],
    distances: &mut [f64],
    previous: &Matrix,
) {
    let k = next.rows();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &d) in distances.iter().enumerate() {
            if counts[assignments[i]] > 1 && far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        match far {
            Some((i, _)) => {
                counts[assignments[i]] -= 1;
                counts[c] += 1;
                assignments[i] = c;
                distances[i] = 0.0;
                next.row_mut(c).copy_from_slice(x.row(i));
            }
            // Every cluster is a singleton; keep the old position.
            None => next.row_mut(c).copy_from_slice(previous.row(c)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(per_blob: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0, 0.0], [20.0, 20.0, -20.0]];
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                rows.push(
                    c.iter()
                        .map(|m| m + 0.5 * rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<f64>>(),
                );
                truth.push(b);
            }
        }
        (Matrix::from_rows(&rows), truth)
    }

    #[test]
    fn separated_points_each_get_a_cluster() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]);
        let res = kmeans(&x, &KMeansConfig::new(3, 7)).unwrap();
        let mut seen = res.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, [0, 1, 2]);
        assert_eq!(res.inertia, 0.0);
    }

    #[test]
    fn two_blobs_match_exhaustive_partition() {
        // Oracle: each point goes to the blob mean it is closer to, computed
        // from the ground-truth membership.
        let (x, truth) = blobs(10, 3);
        let mut means = [[0.0; 3]; 2];
        for (row, &b) in x.iter_rows().zip(&truth) {
            for j in 0..3 {
                means[b][j] += row[j] / 10.0;
            }
        }
        let oracle: Vec<usize> = x
            .iter_rows()
            .map(|r| usize::from(squared_distance(r, &means[1]) < squared_distance(r, &means[0])))
            .collect();
        assert_eq!(oracle, truth);

        let res = kmeans(&x, &KMeansConfig::new(2, 11)).unwrap();
        let flip = res.assignments[0] != oracle[0];
        for (a, o) in res.assignments.iter().zip(&oracle) {
            assert_eq!(*a != *o, flip);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let (x, _) = blobs(40, 5);
        let a = kmeans(&x, &KMeansConfig::new(5, 99)).unwrap();
        let b = kmeans(&x, &KMeansConfig::new(5, 99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(
            kmeans(&x, &KMeansConfig::new(3, 0)),
            Err(KMeansError::TooFewSamples { n: 2, k: 3 })
        );
        assert_eq!(kmeans(&x, &KMeansConfig::new(0, 0)), Err(KMeansError::ZeroClusters));
    }

    #[test]
    fn fewer_distinct_points_than_k_terminates() {
        // Only two distinct values: one of three clusters must stay empty
        // because coincident centroids resolve ties to the lower index.
        let x = Matrix::from_rows(&[[1.0], [1.0], [1.0], [5.0]]);
        let res = kmeans(&x, &KMeansConfig::new(3, 1)).unwrap();
        assert_eq!(res.inertia, 0.0);
        assert!(res.assignments.iter().all(|&a| a < 3));
        assert_eq!(res.cluster_sizes().iter().filter(|&&s| s > 0).count(), 2);
    }

    #[test]
    fn empty_cluster_is_reseeded_from_farthest_point() {
        // Seeds both centroids inside the left group; the right outlier must
        // end up with its own cluster.
        let x = Matrix::from_rows(&[[0.0], [0.1], [0.2], [9.0]]);
        for seed in 0..20 {
            let res = kmeans(&x, &KMeansConfig::new(2, seed)).unwrap();
            assert_eq!(res.cluster_sizes().iter().filter(|&&s| s > 0).count(), 2);
            assert_ne!(res.assignments[3], res.assignments[0]);
        }
    }

    #[test]
    fn nearest_centroid_ties_go_low() {
        let c = Matrix::from_rows(&[[0.0], [2.0]]);
        assert_eq!(nearest_centroid(&c, &[1.0]), 0);
        assert_eq!(nearest_centroid(&c, &[1.5]), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn objective_never_increases(seed in 0u64..1000, k in 1usize..6, n in 6usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x = Matrix::from_row_major(n, 2, data);
            let res = kmeans(&x, &KMeansConfig::new(k, seed)).unwrap();
            for w in res.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", res.inertia_history);
            }
            prop_assert!(res.assignments.iter().all(|&a| a < k));
        }
    }
}
