//! Cluster annotations and their resolution into image labels.
//!
//! Each annotator answers three questions per cluster: the panel type, one or
//! more global concepts, and one or more free-text local concepts. Labels are
//! compared after [`normalize_label`]. Within each field a label named by at
//! least two annotators is accepted; the most frequent label is primary, with
//! ties going to the lexicographically smallest normalised form. Labels named
//! by exactly one annotator put the cluster in the review queue instead of
//! being guessed at.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::stats::{histogram, Summary};
use crate::taxonomy::Taxonomy;
use crate::text::normalize_label;

pub type ClusterId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelType {
    Single,
    MultiNonbio,
    MultiBioPlots,
    MultiBioAssays,
}

impl PanelType {
    pub const ALL: [PanelType; 4] = [
        PanelType::Single,
        PanelType::MultiNonbio,
        PanelType::MultiBioPlots,
        PanelType::MultiBioAssays,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PanelType::Single => "single",
            PanelType::MultiNonbio => "multi_nonbio",
            PanelType::MultiBioPlots => "multi_bio_plots",
            PanelType::MultiBioAssays => "multi_bio_assays",
        }
    }

    /// Answer text shown on the annotation form.
    pub fn description(self) -> &'static str {
        match self {
            PanelType::Single => "Single panels",
            PanelType::MultiNonbio => "Multiple panels with non-biomedical imaging",
            PanelType::MultiBioPlots => "Multiple panels with biomedical imaging and plots",
            PanelType::MultiBioAssays => "Multiple panels with biomedical imaging and assays",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn is_multi_panel(self) -> bool {
        self != PanelType::Single
    }
}

impl fmt::Display for PanelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotator's answers for one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAnnotation {
    pub annotator_id: String,
    pub cluster_id: ClusterId,
    pub panel_type: PanelType,
    pub global_labels: Vec<String>,
    pub local_labels: Vec<String>,
    /// RFC 3339 timestamp assigned on submission.
    #[serde(default)]
    pub submitted_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: &str) -> Self {
        Self {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

impl ClusterAnnotation {
    /// Structural checks applied before an annotation is accepted.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        if self.annotator_id.trim().is_empty() {
            errors.push(FieldError::new("annotator_id", "must not be empty"));
        }
        if self.global_labels.is_empty() {
            errors.push(FieldError::new("global_labels", "at least one global concept is required"));
        }
        if self.global_labels.iter().any(|l| normalize_label(l).is_empty()) {
            errors.push(FieldError::new("global_labels", "labels must not be blank"));
        }
        if self.local_labels.iter().any(|l| normalize_label(l).is_empty()) {
            errors.push(FieldError::new("local_labels", "labels must not be blank"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Votes for one answer field of one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FieldVotes {
    /// Normalised label to the number of annotators naming it.
    pub counts: BTreeMap<String, u32>,
    /// Labels named by exactly one annotator.
    pub singletons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedClusterLabels {
    pub cluster_id: ClusterId,
    pub annotator_count: u32,
    pub panel_type: PanelType,
    pub primary_global: String,
    pub secondary_globals: Vec<String>,
    pub primary_local: String,
    pub secondary_locals: Vec<String>,
    pub needs_review: bool,
    pub panel_votes: FieldVotes,
    pub global_votes: FieldVotes,
    pub local_votes: FieldVotes,
    /// Accepted local labels that are not part of the taxonomy.
    #[serde(default)]
    pub unknown_concepts: Vec<String>,
}

impl ResolvedClusterLabels {
    /// Accepted global labels, primary first.
    pub fn accepted_globals(&self) -> Vec<&str> {
        accepted(&self.primary_global, &self.secondary_globals)
    }

    pub fn accepted_locals(&self) -> Vec<&str> {
        accepted(&self.primary_local, &self.secondary_locals)
    }
}

fn accepted<'a>(primary: &'a str, secondary: &'a [String]) -> Vec<&'a str> {
    let mut out = Vec::new();
    if !primary.is_empty() {
        out.push(primary);
    }
    out.extend(secondary.iter().map(String::as_str));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("no annotations to resolve")]
    Empty,
    #[error("annotations mix clusters {0} and {1}")]
    MixedClusters(ClusterId, ClusterId),
}

/// Majority-vote outcome of one field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldOutcome {
    /// Most voted label in display form, empty when nobody answered.
    pub primary: String,
    /// Other accepted labels, by decreasing count then normalised form.
    pub secondary: Vec<String>,
    pub votes: FieldVotes,
}

impl FieldOutcome {
    pub fn has_singletons(&self) -> bool {
        !self.votes.singletons.is_empty()
    }
}

/// Resolves one field. `answers` holds each annotator's labels; a label
/// repeated inside one answer counts once.
///
/// `display` maps a normalised label to the spelling reported; by default the
/// lexicographically smallest trimmed spelling seen is used.
pub fn resolve_field<S: AsRef<str>>(
    answers: &[Vec<S>],
    display: impl Fn(&str) -> Option<String>,
) -> FieldOutcome {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    let mut spellings: BTreeMap<String, String> = BTreeMap::new();
    for answer in answers {
        let mut seen = BTreeSet::new();
        for raw in answer {
            let raw = raw.as_ref();
            let key = normalize_label(raw);
            if key.is_empty() || !seen.insert(key.clone()) {
                continue;
            }
            *counts.entry(key.clone()).or_insert(0) += 1;
            let trimmed = raw.trim();
            spellings
                .entry(key)
                .and_modify(|s| {
                    if trimmed < s.as_str() {
                        *s = trimmed.to_string();
                    }
                })
                .or_insert_with(|| trimmed.to_string());
        }
    }

    let single_annotator = answers.len() == 1;
    let mut ranked: Vec<(&String, u32)> = counts.iter().map(|(k, c)| (k, *c)).collect();
    // BTreeMap order is already ascending by key; a stable sort on count keeps
    // that as the tie-break.
    ranked.sort_by_key(|r| core::cmp::Reverse(r.1));

    let show = |key: &str| display(key).unwrap_or_else(|| spellings[key].clone());
    let primary = ranked.first().map(|(k, _)| show(k)).unwrap_or_default();
    let secondary = ranked
        .iter()
        .skip(1)
        .filter(|(_, c)| single_annotator || *c >= 2)
        .map(|(k, _)| show(k))
        .collect();
    let singletons = ranked
        .iter()
        .filter(|(_, c)| *c == 1)
        .map(|(k, _)| (*k).clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    FieldOutcome {
        primary,
        secondary,
        votes: FieldVotes { counts, singletons },
    }
}

/// Resolves all annotations of one cluster.
pub fn resolve_cluster(annotations: &[ClusterAnnotation]) -> Result<ResolvedClusterLabels, ResolveError> {
    resolve_inner(annotations, None)
}

/// Like [`resolve_cluster`], reporting labels in their canonical taxonomy
/// spelling and flagging accepted local labels the taxonomy does not know.
pub fn resolve_cluster_with(
    annotations: &[ClusterAnnotation],
    taxonomy: &Taxonomy,
) -> Result<ResolvedClusterLabels, ResolveError> {
    resolve_inner(annotations, Some(taxonomy))
}

fn resolve_inner(
    annotations: &[ClusterAnnotation],
    taxonomy: Option<&Taxonomy>,
) -> Result<ResolvedClusterLabels, ResolveError> {
    let first = annotations.first().ok_or(ResolveError::Empty)?;
    if let Some(other) = annotations.iter().find(|a| a.cluster_id != first.cluster_id) {
        return Err(ResolveError::MixedClusters(first.cluster_id, other.cluster_id));
    }

    let panels: Vec<Vec<&str>> = annotations.iter().map(|a| alloc::vec![a.panel_type.as_str()]).collect();
    let globals: Vec<Vec<&str>> = annotations
        .iter()
        .map(|a| a.global_labels.iter().map(String::as_str).collect())
        .collect();
    let locals: Vec<Vec<&str>> = annotations
        .iter()
        .map(|a| a.local_labels.iter().map(String::as_str).collect())
        .collect();

    let panel = resolve_field(&panels, |_| None);
    let global = resolve_field(&globals, |k| {
        taxonomy.and_then(|t| t.canonical_global(k)).map(str::to_string)
    });
    let local = resolve_field(&locals, |k| {
        taxonomy.and_then(|t| t.canonical_local(k)).map(str::to_string)
    });

    let unknown_concepts = match taxonomy {
        Some(t) => accepted(&local.primary, &local.secondary)
            .into_iter()
            .filter(|l| t.canonical_local(l).is_none())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };

    let panel_type = PanelType::parse(&panel.primary).expect("panel votes come from PanelType");
    let needs_review = annotations.len() == 1
        || panel.has_singletons()
        || global.has_singletons()
        || local.has_singletons();

    Ok(ResolvedClusterLabels {
        cluster_id: first.cluster_id,
        annotator_count: annotations.len() as u32,
        panel_type,
        primary_global: global.primary,
        secondary_globals: global.secondary,
        primary_local: local.primary,
        secondary_locals: local.secondary,
        needs_review,
        panel_votes: panel.votes,
        global_votes: global.votes,
        local_votes: local.votes,
        unknown_concepts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("assignments reference unresolved clusters {0:?}")]
pub struct UnresolvedClusters(pub Vec<ClusterId>);

/// Copies each cluster's resolved labels onto every image assigned to it.
pub fn propagate<K: Ord + Clone>(
    resolved: &BTreeMap<ClusterId, ResolvedClusterLabels>,
    assignments: &BTreeMap<K, ClusterId>,
) -> Result<BTreeMap<K, ResolvedClusterLabels>, UnresolvedClusters> {
    let missing: BTreeSet<ClusterId> = assignments
        .values()
        .filter(|c| !resolved.contains_key(c))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(UnresolvedClusters(missing.into_iter().collect()));
    }
    Ok(assignments
        .iter()
        .map(|(k, c)| (k.clone(), resolved[c].clone()))
        .collect())
}

/// Annotation fields for which disagreement is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Panel,
    Global,
    Local,
}

/// Disagreement percentage for one field of one cluster:
/// `100 * (1 - top_count / annotators)`.
pub fn field_disagreement<S: AsRef<str>>(answers: &[Vec<S>]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let outcome = resolve_field(answers, |_| None);
    let top = outcome.votes.counts.values().copied().max().unwrap_or(0);
    100.0 * (1.0 - f64::from(top) / answers.len() as f64)
}

/// Per-field disagreement of one cluster, or `None` with fewer than two
/// annotators.
pub fn cluster_disagreement(annotations: &[ClusterAnnotation]) -> Option<[(Concept, f64); 3]> {
    if annotations.len() < 2 {
        return None;
    }
    let panels: Vec<Vec<&str>> = annotations.iter().map(|a| alloc::vec![a.panel_type.as_str()]).collect();
    let globals: Vec<Vec<&str>> = annotations
        .iter()
        .map(|a| a.global_labels.iter().map(String::as_str).collect())
        .collect();
    let locals: Vec<Vec<&str>> = annotations
        .iter()
        .map(|a| a.local_labels.iter().map(String::as_str).collect())
        .collect();
    Some([
        (Concept::Panel, field_disagreement(&panels)),
        (Concept::Global, field_disagreement(&globals)),
        (Concept::Local, field_disagreement(&locals)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDisagreement {
    pub concept: Concept,
    pub summary: Summary,
    /// Ten bins of ten percentage points over `[0, 100]`.
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    /// Clusters with at least two annotators.
    pub clusters: usize,
    pub empty: bool,
    pub concepts: Vec<ConceptDisagreement>,
}

/// Disagreement statistics over every cluster with two or more annotators.
pub fn disagreement_stats(groups: &BTreeMap<ClusterId, Vec<ClusterAnnotation>>) -> DisagreementReport {
    let mut per_concept: BTreeMap<Concept, Vec<f64>> = BTreeMap::new();
    let mut clusters = 0;
    for annotations in groups.values() {
        if let Some(values) = cluster_disagreement(annotations) {
            clusters += 1;
            for (concept, v) in values {
                per_concept.entry(concept).or_default().push(v);
            }
        }
    }
    let concepts = [Concept::Panel, Concept::Global, Concept::Local]
        .into_iter()
        .map(|concept| {
            let values = per_concept.remove(&concept).unwrap_or_default();
            ConceptDisagreement {
                concept,
                summary: Summary::of(&values),
                histogram: histogram(&values, 0.0, 100.0, 10),
            }
        })
        .collect();
    DisagreementReport {
        clusters,
        empty: clusters == 0,
        concepts,
    }
}

/// Truncates a percentage to two decimals as tabulated in reports
/// (66.666… becomes 66.66).
pub fn truncate_2dp(x: f64) -> f64 {
    libm::floor(x * 100.0 + 1e-9) / 100.0
}
