//! Figure-level samples: one image, its caption and the denormalized
//! article, image and label metadata.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};

use litfig_core::subset::{concept_balance, concept_filter, FilterCounts, UnlabeledItem};
use litfig_core::vote::{ClusterId, ResolvedClusterLabels};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::embed::EmbeddingMatrix;
use crate::jats::{ArticleDoc, FigureRecord};

/// Metadata keys of every sample, in the order they are written.
pub const METADATA_FIELDS: [&str; 27] = [
    "image_key",
    "image_file",
    "caption",
    "image_cluster_id",
    "image_hash",
    "image_file_name",
    "image_set",
    "image_context",
    "image_panel_type",
    "image_panel_subtype",
    "image_primary_label",
    "image_secondary_label",
    "article_keywords",
    "article_category",
    "article_title",
    "article_abstract",
    "article_full_text",
    "article_publication_date",
    "article_mesh_terms",
    "article_journal",
    "article_pmid",
    "article_citation",
    "article_license",
    "article_citing_pmids",
    "article_citing_count",
    "image_features",
    "image_contrastive_features",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Path(PathBuf),
    Bytes(Vec<u8>),
}

impl ImageSource {
    pub fn bytes(&self) -> io::Result<Vec<u8>> {
        match self {
            ImageSource::Path(p) => std::fs::read(p),
            ImageSource::Bytes(b) => Ok(b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSample {
    pub key: String,
    pub image: ImageSource,
    pub caption: String,
    pub metadata: Map<String, Value>,
}

impl FigureSample {
    fn str_field(&self, path: &[&str]) -> Option<&str> {
        let mut v = self.metadata.get(path[0])?;
        for p in &path[1..] {
            v = v.get(p)?;
        }
        v.as_str()
    }

    pub fn primary_global(&self) -> Option<&str> {
        self.str_field(&["image_primary_label", "global"])
    }

    pub fn primary_local(&self) -> Option<&str> {
        self.str_field(&["image_primary_label", "local"])
    }

    pub fn image_hash(&self) -> Option<&str> {
        self.str_field(&["image_hash"])
    }
}

pub fn sample_key(accession_id: &str, image_id: &str) -> String {
    format!("{accession_id}_{image_id}")
}

/// Image location of a figure inside the extracted articles directory.
pub fn figure_path(articles_dir: &Path, article: &ArticleDoc, fig: &FigureRecord) -> PathBuf {
    articles_dir.join(&article.accession_id).join(&fig.image_file)
}

fn article_fields(a: &ArticleDoc) -> Vec<(&'static str, Value)> {
    vec![
        ("article_keywords", json!(a.keywords)),
        ("article_category", json!(a.category)),
        ("article_title", json!(a.title)),
        ("article_abstract", json!(a.abstract_text)),
        ("article_full_text", json!(a.full_text)),
        ("article_publication_date", json!(a.date)),
        ("article_mesh_terms", json!(a.mesh_terms)),
        ("article_journal", json!(a.journal)),
        ("article_pmid", json!(a.pmid)),
        ("article_citation", json!(a.citation)),
        ("article_license", json!({"raw": a.license_raw, "group": a.license_group})),
        ("article_citing_pmids", json!(a.citing_pmids)),
        ("article_citing_count", json!(a.citing_count)),
    ]
}

fn label_fields(cluster: Option<ClusterId>, labels: Option<&ResolvedClusterLabels>) -> Vec<(&'static str, Value)> {
    let (panel, subtype, primary, secondary) = match labels {
        Some(r) => (
            json!(if r.panel_type.is_multi_panel() { "multiple" } else { "single" }),
            if r.panel_type.is_multi_panel() { json!(r.panel_type.as_str()) } else { Value::Null },
            json!({"global": r.primary_global, "local": r.primary_local}),
            json!({"global": r.secondary_globals, "local": r.secondary_locals}),
        ),
        None => (Value::Null, Value::Null, Value::Null, Value::Null),
    };
    vec![
        ("image_cluster_id", json!(cluster)),
        ("image_panel_type", panel),
        ("image_panel_subtype", subtype),
        ("image_primary_label", primary),
        ("image_secondary_label", secondary),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFigure {
    pub key: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Denormalized {
    pub samples: Vec<FigureSample>,
    pub skipped: Vec<SkippedFigure>,
}

/// Label inputs for denormalization. Images absent from `assignments`, or
/// whose cluster has no resolution, pass through with null labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelSources<'a> {
    pub assignments: Option<&'a BTreeMap<String, ClusterId>>,
    pub resolved: Option<&'a BTreeMap<ClusterId, ResolvedClusterLabels>>,
    pub features: Option<&'a EmbeddingMatrix>,
}

/// One sample per figure, in article order then figure order. Figures whose
/// image is missing on disk are skipped and reported.
pub fn denormalize(articles: &[ArticleDoc], articles_dir: &Path, labels: LabelSources<'_>) -> Denormalized {
    let mut out = Denormalized::default();
    let mut seen: HashSet<String> = HashSet::new();
    let feature_rows: HashMap<&str, usize> = labels
        .features
        .map(|m| m.row_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect())
        .unwrap_or_default();
    for a in articles {
        let image_set: Vec<&str> = a.figure_set.iter().map(|f| f.image_id.as_str()).collect();
        let shared = article_fields(a);
        for fig in &a.figure_set {
            let key = sample_key(&a.accession_id, &fig.image_id);
            let path = figure_path(articles_dir, a, fig);
            if fig.missing || !path.is_file() {
                out.skipped.push(SkippedFigure {
                    key,
                    reason: format!("image file missing: {}", path.display()),
                });
                continue;
            }
            if !seen.insert(key.clone()) {
                out.skipped.push(SkippedFigure {
                    key,
                    reason: "duplicate sample key".into(),
                });
                continue;
            }
            let cluster = labels.assignments.and_then(|m| m.get(&key)).copied();
            let resolved = cluster.and_then(|c| labels.resolved.and_then(|r| r.get(&c)));
            let features = match (labels.features, feature_rows.get(key.as_str())) {
                (Some(m), Some(&i)) => json!(m.row(i)),
                _ => Value::Null,
            };

            let mut fields: BTreeMap<&'static str, Value> = BTreeMap::new();
            fields.insert("image_key", json!(key));
            fields.insert("image_file", json!(format!("{}/{}", a.accession_id, fig.image_file)));
            fields.insert("caption", json!(fig.caption));
            fields.insert("image_hash", json!(fig.image_hash));
            fields.insert(
                "image_file_name",
                json!(Path::new(&fig.image_file).file_name().map(|n| n.to_string_lossy().into_owned())),
            );
            fields.insert("image_set", json!(image_set));
            fields.insert("image_context", json!(fig.mentions));
            fields.extend(label_fields(cluster, resolved));
            fields.extend(shared.iter().cloned());
            fields.insert("image_features", features);
            fields.insert("image_contrastive_features", Value::Null);

            let metadata: Map<String, Value> = METADATA_FIELDS
                .iter()
                .map(|k| ((*k).to_string(), fields.remove(k).expect("every metadata field is set")))
                .collect();
            out.samples.push(FigureSample {
                key,
                image: ImageSource::Path(path),
                caption: fig.caption.clone(),
                metadata,
            });
        }
    }
    out
}

/// How a subset is carved out of the labeled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsetSpec {
    All,
    Filter {
        keep_globals: BTreeSet<String>,
        #[serde(default)]
        strict: bool,
    },
    Balance {
        cap_per_local: usize,
        seed: u64,
    },
    FilterThenBalance {
        keep_globals: BTreeSet<String>,
        #[serde(default)]
        strict: bool,
        cap_per_local: usize,
        seed: u64,
    },
}

impl SubsetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SubsetSpec::All => "all",
            SubsetSpec::Filter { .. } => "concept_filtered",
            SubsetSpec::Balance { .. } => "concept_balanced",
            SubsetSpec::FilterThenBalance { .. } => "concept_filtered_balanced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub unlabeled: usize,
}

fn counts_from(f: &FilterCounts, input: usize) -> SubsetCounts {
    SubsetCounts {
        input,
        kept: f.kept,
        dropped: f.dropped,
        unlabeled: f.unlabeled,
    }
}

pub fn apply_subset(samples: Vec<FigureSample>, spec: &SubsetSpec) -> Result<(Vec<FigureSample>, SubsetCounts), UnlabeledItem> {
    let input = samples.len();
    let balance = |items: Vec<FigureSample>, cap: usize, seed: u64| {
        concept_balance(items, cap, seed, |s: &FigureSample| s.primary_local())
    };
    match spec {
        SubsetSpec::All => Ok((
            samples,
            SubsetCounts {
                input,
                kept: input,
                ..SubsetCounts::default()
            },
        )),
        SubsetSpec::Filter { keep_globals, strict } => {
            let (kept, c) = concept_filter(samples, keep_globals, *strict, |s: &FigureSample| s.primary_global())?;
            Ok((kept, counts_from(&c, input)))
        }
        SubsetSpec::Balance { cap_per_local, seed } => {
            let kept = balance(samples, *cap_per_local, *seed);
            let n = kept.len();
            Ok((
                kept,
                SubsetCounts {
                    input,
                    kept: n,
                    dropped: input - n,
                    unlabeled: 0,
                },
            ))
        }
        SubsetSpec::FilterThenBalance {
            keep_globals,
            strict,
            cap_per_local,
            seed,
        } => {
            let (kept, c) = concept_filter(samples, keep_globals, *strict, |s: &FigureSample| s.primary_global())?;
            let after = balance(kept, *cap_per_local, *seed);
            let n = after.len();
            Ok((
                after,
                SubsetCounts {
                    input,
                    kept: n,
                    dropped: input - n - c.unlabeled,
                    unlabeled: c.unlabeled,
                },
            ))
        }
    }
}

/// Drops later samples that repeat an earlier (image hash, caption) pair.
pub fn dedup_samples(samples: Vec<FigureSample>) -> (Vec<FigureSample>, usize) {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let before = samples.len();
    let kept: Vec<FigureSample> = samples
        .into_iter()
        .filter(|s| seen.insert((s.image_hash().unwrap_or("").to_string(), s.caption.clone())))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}
