//! Principal component analysis by covariance eigendecomposition.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigen, Matrix};

/// Eigenvalues at or below this fraction of the total variance are treated as
/// numerically zero and never retained.
const NEGLIGIBLE_VARIANCE: f64 = 1e-12;

/// Slack when comparing a cumulative ratio with the variance target, so that
/// exactly low-rank data reaches a target of 1.0.
const TARGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PcaError {
    #[error("PCA needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("variance target must lie in (0, 1], got {0}")]
    InvalidTarget(f64),
    #[error("input contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("input has zero total variance")]
    ZeroVariance,
    #[error("dimension mismatch: model has {expected} features, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x d`, orthonormal rows, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Whether the cumulative ratio of the retained components reaches the
    /// requested target.
    pub reached_target: bool,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    /// Maps each row to `(x - mean) · componentsᵀ`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix, PcaError> {
        if x.cols() != self.n_features() {
            return Err(PcaError::DimensionMismatch {
                expected: self.n_features(),
                actual: x.cols(),
            });
        }
        let k = self.n_components();
        let mut out = Matrix::zeros(x.rows(), k);
        let mut centered = alloc::vec![0.0; x.cols()];
        for (i, row) in x.iter_rows().enumerate() {
            for ((c, v), m) in centered.iter_mut().zip(row).zip(&self.mean) {
                *c = v - m;
            }
            for (j, comp) in self.components.iter().enumerate() {
                out[(i, j)] = crate::linalg::dot(&centered, comp);
            }
        }
        Ok(out)
    }

    /// Inverse of [`PcaModel::project`] on the retained subspace.
    pub fn reconstruct(&self, projected: &Matrix) -> Result<Matrix, PcaError> {
        if projected.cols() != self.n_components() {
            return Err(PcaError::DimensionMismatch {
                expected: self.n_components(),
                actual: projected.cols(),
            });
        }
        let d = self.n_features();
        let mut out = Matrix::zeros(projected.rows(), d);
        for (i, coords) in projected.iter_rows().enumerate() {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.mean);
            for (c, comp) in coords.iter().zip(&self.components) {
                for (r, v) in row.iter_mut().zip(comp) {
                    *r += c * v;
                }
            }
        }
        Ok(out)
    }
}

/// Fits a PCA model retaining the fewest components whose cumulative explained
/// variance reaches `variance_target`, never more than `max_components`.
///
/// Each component's sign is fixed so its largest-magnitude coordinate is
/// positive, which makes repeated fits on the same data identical.
pub fn fit_pca(
    x: &Matrix,
    variance_target: f64,
    max_components: Option<usize>,
) -> Result<PcaModel, PcaError> {
    if x.rows() < 2 {
        return Err(PcaError::TooFewSamples(x.rows()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(PcaError::InvalidTarget(variance_target));
    }
    for (row, values) in x.iter_rows().enumerate() {
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(PcaError::NonFinite { row, col });
        }
    }

    let mean = x.column_means();
    let cov = x.covariance(&mean);
    let eig = symmetric_eigen(&cov);
    let variances: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    if total <= 0.0 {
        return Err(PcaError::ZeroVariance);
    }

    let usable = variances
        .iter()
        .take_while(|v| **v > NEGLIGIBLE_VARIANCE * total)
        .count();
    let cap = max_components.unwrap_or(usable).min(usable).max(1);

    let mut cumulative = 0.0;
    let mut k = 0;
    let mut reached = false;
    while k < cap {
        cumulative += variances[k] / total;
        k += 1;
        if cumulative >= variance_target - TARGET_SLACK {
            reached = true;
            break;
        }
    }

    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        let mut comp = eig.vectors.row(i).to_vec();
        let pivot = comp
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if libm::fabs(*v) > libm::fabs(comp[best]) { j } else { best });
        if comp[pivot] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        components.push(comp);
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance: variances[..k].to_vec(),
        explained_variance_ratio: variances[..k].iter().map(|v| v / total).collect(),
        reached_target: reached,
        total_variance: total,
    })
}
