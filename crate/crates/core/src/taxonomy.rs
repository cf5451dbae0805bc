//! Two-level concept taxonomy: global concepts, each owning local concepts.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::text::normalize_label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaxonomyError {
    #[error("empty concept name under {0:?}")]
    EmptyName(String),
    #[error("global concept {0:?} collides with another after normalization")]
    DuplicateGlobal(String),
    #[error("local concept {local:?} appears under both {first:?} and {second:?}")]
    DuplicateLocal {
        local: String,
        first: String,
        second: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    entries: Vec<(String, Vec<String>)>,
    global_index: BTreeMap<String, usize>,
    local_index: BTreeMap<String, (usize, usize)>,
}

impl Taxonomy {
    /// Builds a taxonomy from `(global, locals)` pairs, keeping their order.
    ///
    /// Names must be unique within each level after [`normalize_label`]; a
    /// global and a local may share a name ("Microscopy" / "microscopy").
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self, TaxonomyError> {
        let mut global_index = BTreeMap::new();
        let mut local_index: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (g, (global, locals)) in entries.iter().enumerate() {
            let gk = normalize_label(global);
            if gk.is_empty() {
                return Err(TaxonomyError::EmptyName(global.clone()));
            }
            if global_index.insert(gk, g).is_some() {
                return Err(TaxonomyError::DuplicateGlobal(global.clone()));
            }
            for (l, local) in locals.iter().enumerate() {
                let lk = normalize_label(local);
                if lk.is_empty() {
                    return Err(TaxonomyError::EmptyName(global.clone()));
                }
                if let Some(&(pg, _)) = local_index.get(&lk) {
                    return Err(TaxonomyError::DuplicateLocal {
                        local: local.clone(),
                        first: entries[pg].0.clone(),
                        second: global.clone(),
                    });
                }
                local_index.insert(lk, (g, l));
            }
        }
        Ok(Self {
            entries,
            global_index,
            local_index,
        })
    }

    /// The hierarchy shipped with the dataset release.
    pub fn builtin() -> Self {
        let entries = BUILTIN
            .iter()
            .map(|(g, ls)| (g.to_string(), ls.iter().map(|l| l.to_string()).collect()))
            .collect();
        Self::new(entries).expect("builtin taxonomy is valid")
    }

    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.entries
    }

    pub fn globals(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|(g, _)| g.as_str())
    }

    pub fn global_count(&self) -> usize {
        self.entries.len()
    }

    pub fn local_count(&self) -> usize {
        self.local_index.len()
    }

    pub fn locals_of(&self, global: &str) -> Option<&[String]> {
        let g = *self.global_index.get(&normalize_label(global))?;
        Some(&self.entries[g].1)
    }

    /// Canonical spelling of a global concept, matched after normalisation.
    pub fn canonical_global(&self, raw: &str) -> Option<&str> {
        let g = *self.global_index.get(&normalize_label(raw))?;
        Some(&self.entries[g].0)
    }

    /// Canonical spelling of a local concept, matched after normalisation.
    pub fn canonical_local(&self, raw: &str) -> Option<&str> {
        let (g, l) = *self.local_index.get(&normalize_label(raw))?;
        Some(&self.entries[g].1[l])
    }

    pub fn parent_of(&self, local: &str) -> Option<&str> {
        let (g, _) = *self.local_index.get(&normalize_label(local))?;
        Some(&self.entries[g].0)
    }
}

const BUILTIN: &[(&str, &[&str])] = &[
    ("Ambiguous", &["ambiguous"]),
    (
        "Chemical Structures",
        &[
            "2D chemical reaction",
            "3D chemical reaction",
            "2D chemical structure",
            "3D protein structure",
            "3D chemical structure",
        ],
    ),
    (
        "Clinical Imaging",
        &[
            "x-ray radiography",
            "optical coherence tomography",
            "endoscopy",
            "intraoral imaging",
            "angiography",
            "procedural image",
            "skull",
            "patient photo",
            "functional magnetic resonance",
            "magnetic resonance",
            "eye",
            "mammography",
            "electrocardiography",
            "clinical imaging",
            "skin lesion",
            "ultrasound",
            "specimen",
            "computerized tomography",
            "laryngoscopy",
            "teeth",
            "intraoperative image",
            "surgical procedure",
            "brain",
        ],
    ),
    ("Graphs and Networks", &["graph", "neural network", "network"]),
    (
        "Illustrative Diagrams",
        &[
            "sankey diagram",
            "metabolic pathway",
            "scientific illustration",
            "diagram",
            "signaling pathway",
            "illustrative diagram",
            "flow diagram",
            "cohort selection flowchart",
            "illustration",
            "drawing",
            "system diagram",
            "flowchart",
        ],
    ),
    (
        "Immuno Assays",
        &[
            "immunocytochemistry",
            "karyotype",
            "gel electrophoresis",
            "immunoassay",
            "immunoblot",
            "assay",
            "immunohistochemistry",
        ],
    ),
    (
        "Laboratory Specimens and Cultures",
        &["reagents", "laboratory specimen", "bacterial culture"],
    ),
    ("Maps", &["map"]),
    (
        "Microscopy",
        &[
            "scanning electron microscopy",
            "electron microscopy",
            "flowcytometry",
            "transmission electron microscopy",
            "light microscopy",
            "fluorescence microscopy",
            "phase contrast microscopy",
            "confocal microscopy",
            "epifluorescence microscopy",
            "microscopy",
        ],
    ),
    (
        "Natural Images",
        &[
            "face",
            "aerial photography",
            "natural image",
            "human head",
            "humans and devices",
            "human",
            "insects",
            "nature",
        ],
    ),
    ("PCR", &["qPCR", "RT PCR"]),
    (
        "Plots and Charts",
        &[
            "violin plot",
            "bar plot",
            "roc curve",
            "sequence plot",
            "radial plot",
            "plot",
            "matrix plot",
            "phylogenetic tree",
            "process chart",
            "dot plot",
            "pyramid chart",
            "forest plot",
            "box plot",
            "survival curve",
            "circos plot",
            "venn diagram",
            "heatmap plot",
            "circular plot",
            "scatter plot",
            "word cloud",
            "list",
            "tree",
            "density plot",
            "funnel plot",
            "plot and chart",
            "2D mesh",
            "3D plot",
            "radial diagram",
            "pie chart",
            "manuscript",
            "histogram",
            "differential gene expression matrix",
            "line plot",
            "signal plot",
        ],
    ),
    ("Screen Based Visuals", &["screenshot", "user interface"]),
    ("Scientific Formulae and Equations", &["algorithm"]),
    ("Tables", &["table", "checklist table"]),
    (
        "Tools and Materials",
        &[
            "medical equipment",
            "microscope",
            "electronic circuit",
            "lab equipment",
            "tool",
        ],
    ),
];

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn builtin_is_consistent() {
        let t = Taxonomy::builtin();
        assert_eq!(t.global_count(), 16);
        assert_eq!(t.local_count(), 119);
        let listed: usize = t.entries().iter().map(|(_, l)| l.len()).sum();
        assert_eq!(t.local_count(), listed);
        assert_eq!(t.parent_of("Light Microscopy"), Some("Microscopy"));
        assert_eq!(t.canonical_local("xray radiography"), Some("x-ray radiography"));
        assert_eq!(t.canonical_global("plotsandcharts"), Some("Plots and Charts"));
        assert_eq!(t.parent_of("qpcr"), Some("PCR"));
        assert!(t.canonical_local("hologram").is_none());
    }

    #[test]
    fn every_local_has_one_parent() {
        let t = Taxonomy::builtin();
        for (g, locals) in t.entries() {
            for l in locals {
                assert_eq!(t.parent_of(l), Some(g.as_str()));
            }
        }
    }

    #[test]
    fn duplicates_rejected() {
        let err = Taxonomy::new(vec![
            ("A".into(), vec!["x-ray".into()]),
            ("B".into(), vec!["X Ray".into()]),
        ])
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::DuplicateLocal { .. }));
        let err = Taxonomy::new(vec![("Maps".into(), vec![]), ("maps".into(), vec![])]).unwrap_err();
        assert_eq!(err, TaxonomyError::DuplicateGlobal("maps".into()));
    }
}
