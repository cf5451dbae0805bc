//! Allocation-only building blocks for turning open-access literature into
//! annotated figure-caption datasets.
//!
//! Everything here is deterministic and free of IO: license grouping, label
//! normalisation, request scheduling, exact statistics, PCA, k-means,
//! majority-vote label resolution, subset selection, and zero-shot
//! evaluation metrics. The `litfig` crate layers file formats, networking,
//! and the command line on top.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod batch;
pub mod eval;
pub mod kmeans;
pub mod license;
pub mod linalg;
pub mod pca;
pub mod ratelimit;
pub mod stats;
pub mod subset;
pub mod taxonomy;
pub mod text;
pub mod vote;

pub use license::{classify_license, LicenseGroup};
pub use text::normalize_label;
