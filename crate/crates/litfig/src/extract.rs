//! Extract stage: ingest layout in, article JSONL out.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fsutil::{read_jsonl, to_jsonl, write_atomic};
use crate::ingest::{FileListEntry, IngestLayout, IngestRecord, IngestStatus};
use crate::jats::{parse_article, ArticleDoc, Warning};
use crate::store::{write_article_jsonl, StoreError};

pub const WARNINGS_FILE: &str = "extract-warnings.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractIssue {
    /// The article parsed with warnings; it is kept.
    Warning { accession_id: String, warning: Warning },
    /// The article was dropped.
    Failed { accession_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractReport {
    pub articles_in: usize,
    pub articles_written: usize,
    pub articles_skipped: usize,
    pub figures: usize,
    pub missing_images: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractStageError {
    #[error("{path}: {source}")]
    Log { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Parses one extracted article directory and applies the file-list row,
/// which is authoritative for identifiers, date, citation and license.
pub fn extract_article(entry: &FileListEntry, media_dir: &Path) -> Result<(ArticleDoc, Vec<Warning>), String> {
    let mut nxmls: Vec<PathBuf> = fs::read_dir(media_dir)
        .map_err(|e| format!("{}: {e}", media_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("nxml")))
        .collect();
    nxmls.sort();
    let nxml = nxmls.first().ok_or_else(|| format!("{}: no .nxml file", media_dir.display()))?;
    let bytes = fs::read(nxml).map_err(|e| format!("{}: {e}", nxml.display()))?;
    let parsed = parse_article(&bytes, media_dir).map_err(|e| format!("{}: {e}", nxml.display()))?;
    let mut doc = parsed.doc;
    doc.accession_id = entry.accession_id.clone();
    doc.nxml = nxml.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if entry.pmid.is_some() {
        doc.pmid = entry.pmid;
    }
    if !entry.license.trim().is_empty() {
        doc.set_license(&entry.license);
    }
    if !entry.citation.is_empty() {
        doc.citation = entry.citation.clone();
    }
    if entry.date.len() >= 10 {
        doc.date = entry.date[..10].to_string();
    }
    Ok((doc, parsed.warnings))
}

/// Reads the ingest log under `ingest_root`, parses every fetched article in
/// parallel and writes article JSONL plus a warnings log into `out_dir`.
/// Output order follows the log.
pub fn run_extract(
    ingest_root: &Path,
    out_dir: &Path,
    max_per_file: usize,
) -> Result<ExtractReport, ExtractStageError> {
    let layout = IngestLayout::new(ingest_root);
    let log_path = layout.log();
    let records: Vec<IngestRecord> = read_jsonl(&log_path).map_err(|source| ExtractStageError::Log {
        path: log_path.clone(),
        source,
    })?;
    let usable: Vec<&IngestRecord> = records.iter().filter(|r| r.status != IngestStatus::Failed).collect();
    let articles_dir = layout.articles();
    let results: Vec<Result<(ArticleDoc, Vec<Warning>), (String, String)>> = usable
        .par_iter()
        .map(|r| {
            extract_article(&r.entry, &articles_dir.join(&r.entry.accession_id))
                .map_err(|m| (r.entry.accession_id.clone(), m))
        })
        .collect();

    let mut docs = Vec::new();
    let mut issues = Vec::new();
    for r in results {
        match r {
            Ok((doc, warnings)) => {
                issues.extend(warnings.into_iter().map(|warning| ExtractIssue::Warning {
                    accession_id: doc.accession_id.clone(),
                    warning,
                }));
                docs.push(doc);
            }
            Err((accession_id, message)) => issues.push(ExtractIssue::Failed { accession_id, message }),
        }
    }
    let files = write_article_jsonl(&docs, out_dir, max_per_file)?;
    let wpath = out_dir.join(WARNINGS_FILE);
    let bytes = to_jsonl(&issues).map_err(|source| ExtractStageError::Io {
        path: wpath.clone(),
        source,
    })?;
    write_atomic(&wpath, &bytes).map_err(|source| ExtractStageError::Io { path: wpath, source })?;
    Ok(ExtractReport {
        articles_in: usable.len(),
        articles_written: docs.len(),
        articles_skipped: usable.len() - docs.len(),
        figures: docs.iter().map(|d| d.figure_set.len()).sum(),
        missing_images: docs.iter().flat_map(|d| &d.figure_set).filter(|f| f.missing).count(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{demo_articles, mock_transport};
    use crate::ingest::{ingest_all, parse_file_list, DownloadPolicy};
    use crate::store::read_articles;
    use litfig_core::license::LicenseGroup;
    use std::time::Duration;

    #[test]
    fn demo_corpus_extracts() {
        let specs = demo_articles();
        let entries = parse_file_list(crate::fixtures::file_list_csv(&specs).as_bytes()).unwrap();
        let t = mock_transport(&specs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let policy = DownloadPolicy {
            max_requests_per_second: 100.0,
            rate_slack: Duration::ZERO,
            ..DownloadPolicy::default()
        };
        let layout = IngestLayout::new(dir.path().join("ingest"));
        let recs = ingest_all(&entries, &policy, &t, &layout, 2).unwrap();
        assert!(recs.iter().all(|r| r.status == IngestStatus::Ok), "{recs:?}");

        let out = dir.path().join("jsonl");
        let report = run_extract(&layout.root, &out, 2).unwrap();
        assert_eq!(report.articles_written, 3);
        assert_eq!(report.figures, 7);
        assert_eq!(report.files.len(), 2);
        let docs = read_articles(&out).unwrap();
        assert_eq!(docs[0].accession_id, "PMC1001");
        assert_eq!(docs[0].license_group, LicenseGroup::Commercial);
        assert_eq!(docs[1].license_group, LicenseGroup::Noncommercial);
        assert_eq!(docs[2].license_group, LicenseGroup::Other);
        assert_eq!(docs[2].pmid, None);
        assert_eq!(docs[0].date, "2021-03-04");
        assert_eq!(docs[0].figure_set[1].caption, "Western blot of lysates & controls.");
        assert_eq!(docs[0].figure_set[0].mentions.len(), 1);
        assert_eq!(docs[1].figure_set[1].caption, "");
        let on_disk = &docs[2].figure_set[1];
        assert_eq!((on_disk.image_id.as_str(), on_disk.caption.as_str()), ("pone.0003", ""));
        assert_eq!(on_disk.width, Some(320));
    }
}
