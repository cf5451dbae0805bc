//! Mirror ingestion: the file list, rate-limited package downloads and
//! archive extraction.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use litfig_core::text::lowercase_extension;
use serde::{Deserialize, Serialize};

use crate::fsutil::{read_json, write_atomic, write_json_atomic};
use crate::throttle::{with_retries, RateGate, RetryPolicy, Transient, DEFAULT_SLACK};
use crate::transport::{Transport, TransportError};

/// One row of the mirror's file list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileListEntry {
    pub file_path: String,
    pub citation: String,
    pub accession_id: String,
    pub date: String,
    pub pmid: Option<u64>,
    pub license: String,
}

#[derive(Debug, thiserror::Error)]
pub enum FileListError {
    #[error("file list line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("file list is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("file list line {line}: {message}")]
    InvalidRow { line: u64, message: String },
    #[error("file list line {line}: duplicate file path {path:?} (first seen on line {first_line})")]
    DuplicatePath { path: String, line: u64, first_line: u64 },
}

const COLUMNS: [&str; 6] = ["File", "Citation", "Accession_ID", "Date", "PMID", "License"];

fn header_matches(column: &str, header: &str) -> bool {
    let h: String = header
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match column {
        "File" => h == "file",
        "Citation" => h == "citation" || h == "articlecitation",
        "Accession_ID" => h == "accessionid",
        "Date" => h == "date" || h.starts_with("lastupdated"),
        "PMID" => h == "pmid",
        "License" => h == "license",
        _ => false,
    }
}

fn looks_like_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() >= 10
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
}

/// Parses the mirror's CSV index. Column order does not matter; header names
/// are matched ignoring case and punctuation, and the upstream spellings
/// ("Article Citation", "Last Updated (...)") are accepted.
pub fn parse_file_list<R: Read>(input: R) -> Result<Vec<FileListEntry>, FileListError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| FileListError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 6];
    for (slot, column) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| header_matches(column, h))
            .ok_or(FileListError::MissingColumn(column))?;
    }

    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| FileListError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(index[i]).unwrap_or("").trim().to_string();
        let invalid = |message: String| FileListError::InvalidRow { line, message };

        let file_path = field(0);
        if file_path.is_empty() {
            return Err(invalid("empty File".into()));
        }
        let accession_id = field(2);
        if accession_id.is_empty() {
            return Err(invalid("empty Accession_ID".into()));
        }
        let date = field(3);
        if !looks_like_iso_date(&date) {
            return Err(invalid(format!("Date {date:?} is not ISO-8601")));
        }
        let pmid_raw = field(4);
        let pmid_digits = pmid_raw.strip_prefix("PMID:").unwrap_or(&pmid_raw).trim();
        let pmid = if pmid_digits.is_empty() {
            None
        } else {
            Some(
                pmid_digits
                    .parse::<u64>()
                    .map_err(|_| invalid(format!("PMID {pmid_raw:?} is not numeric")))?,
            )
        };
        if let Some(&first_line) = seen.get(&file_path) {
            return Err(FileListError::DuplicatePath {
                path: file_path,
                line,
                first_line,
            });
        }
        seen.insert(file_path.clone(), line);
        out.push(FileListEntry {
            file_path,
            citation: field(1),
            accession_id,
            date,
            pmid,
            license: field(5),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownloadPolicy {
    pub max_requests_per_second: f64,
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub retry_base_delay: Duration,
    pub keep_extensions: BTreeSet<String>,
    #[serde(with = "millis", default = "default_slack")]
    pub rate_slack: Duration,
}

fn default_slack() -> Duration {
    DEFAULT_SLACK
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for DownloadPolicy {
    fn default() -> Self {
        Self {
            max_requests_per_second: 3.0,
            max_retries: 5,
            retry_base_delay: Duration::from_millis(500),
            keep_extensions: ["nxml", "jpg"].into_iter().map(String::from).collect(),
            rate_slack: DEFAULT_SLACK,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("max_requests_per_second must be positive and finite, got {0}")]
    Rate(f64),
    #[error("keep extension {0:?} must be lowercase without a dot")]
    Extension(String),
}

impl DownloadPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let r = self.max_requests_per_second;
        if !(r.is_finite() && r > 0.0) {
            return Err(PolicyError::Rate(r));
        }
        if let Some(bad) = self
            .keep_extensions
            .iter()
            .find(|e| e.is_empty() || e.contains('.') || **e != e.to_lowercase())
        {
            return Err(PolicyError::Extension(bad.clone()));
        }
        Ok(())
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: self.retry_base_delay,
            ..RetryPolicy::default()
        }
    }

    pub fn gate(&self) -> RateGate {
        RateGate::new(self.max_requests_per_second, self.rate_slack)
    }

    pub fn keeps(&self, name: &str) -> bool {
        lowercase_extension(name).is_some_and(|e| self.keep_extensions.contains(&e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("fetching {path} failed after {attempts} attempts: {last}")]
    Exhausted {
        path: String,
        attempts: u32,
        last: TransportError,
    },
    #[error("{path}: expected {expected}, got {actual}")]
    Integrity {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl Transient for TransportError {
    fn is_transient(&self) -> bool {
        matches!(self, TransportError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FetchStatus {
    Ok,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome {
    pub path: PathBuf,
    pub status: FetchStatus,
    pub bytes: u64,
    pub attempts: u32,
}

/// Sidecar recording what a completed download looked like.
#[derive(Debug, Serialize, Deserialize)]
struct DownloadReceipt {
    size: u64,
    sha256: String,
}

fn receipt_path(archive: &Path) -> PathBuf {
    let mut name = archive.file_name().unwrap_or_default().to_os_string();
    name.push(".receipt.json");
    archive.with_file_name(name)
}

/// Local location of an entry's archive under `archive_root`.
pub fn archive_path(archive_root: &Path, entry: &FileListEntry) -> PathBuf {
    let rel: PathBuf = Path::new(&entry.file_path)
        .components()
        .filter(|c| matches!(c, Component::Normal(_)))
        .collect();
    archive_root.join(rel)
}

/// Downloads one package into `archive_root`.
///
/// A package whose file and receipt already agree on size is skipped without
/// contacting the remote. All requests pass through `gate`, which callers
/// share across concurrent fetches.
pub fn fetch_package(
    entry: &FileListEntry,
    policy: &DownloadPolicy,
    transport: &dyn Transport,
    gate: &RateGate,
    archive_root: &Path,
) -> Result<FetchOutcome, FetchError> {
    let dest = archive_path(archive_root, entry);
    let receipt = receipt_path(&dest);
    if let (Ok(meta), Ok(r)) = (fs::metadata(&dest), read_json::<DownloadReceipt>(&receipt)) {
        if meta.len() == r.size {
            return Ok(FetchOutcome {
                path: dest,
                status: FetchStatus::Skipped,
                bytes: r.size,
                attempts: 0,
            });
        }
    }

    let (got, attempts) = with_retries(gate, &policy.retry(), || transport.retrieve(&entry.file_path))
        .map_err(|e| FetchError::Exhausted {
            path: entry.file_path.clone(),
            attempts: e.attempts,
            last: e.last,
        })?;
    let bytes = got.bytes.len() as u64;
    if let Some(expected) = got.expected_len {
        if expected != bytes {
            return Err(FetchError::Integrity {
                path: entry.file_path.clone(),
                expected: format!("{expected} bytes"),
                actual: format!("{bytes} bytes"),
            });
        }
    }
    let sha256 = crate::fsutil::sha256_hex(&got.bytes);
    if let Some(expected) = &got.expected_sha256 {
        if !expected.eq_ignore_ascii_case(&sha256) {
            return Err(FetchError::Integrity {
                path: entry.file_path.clone(),
                expected: format!("sha256 {expected}"),
                actual: format!("sha256 {sha256}"),
            });
        }
    }
    let io_err = |source| FetchError::Io {
        path: dest.clone(),
        source,
    };
    write_atomic(&dest, &got.bytes).map_err(io_err)?;
    write_json_atomic(&receipt, &DownloadReceipt { size: bytes, sha256 }).map_err(io_err)?;
    Ok(FetchOutcome {
        path: dest,
        status: FetchStatus::Ok,
        bytes,
        attempts,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("{archive}: corrupt archive: {message}")]
    Corrupt { archive: PathBuf, message: String },
    #[error("{archive}: member {member:?} escapes the extraction directory")]
    Security { archive: PathBuf, member: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn open_archive(path: &Path) -> io::Result<tar::Archive<flate2::read::GzDecoder<File>>> {
    Ok(tar::Archive::new(flate2::read::GzDecoder::new(File::open(path)?)))
}

/// Member path relative to the article directory, or `None` if the name is
/// absolute or climbs out of the archive.
fn safe_relative(name: &Path, accession_id: &str) -> Option<PathBuf> {
    let mut parts = Vec::new();
    for c in name.components() {
        match c {
            Component::Normal(p) => parts.push(p),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if parts.len() > 1 && parts[0] == accession_id {
        parts.remove(0);
    }
    Some(parts.iter().collect())
}

/// Extracts kept members of a gzip tar into `dest_root/<accession_id>/`.
///
/// The archive is scanned in full before anything is written: a member that
/// is absolute or contains `..` aborts extraction and leaves the destination
/// untouched. A leading directory named after the accession id is dropped so
/// packages with and without it land in the same layout. Returns the written
/// paths, sorted.
pub fn extract_package(
    archive: &Path,
    accession_id: &str,
    policy: &DownloadPolicy,
    dest_root: &Path,
) -> Result<Vec<PathBuf>, ExtractError> {
    let corrupt = |e: io::Error| ExtractError::Corrupt {
        archive: archive.to_path_buf(),
        message: e.to_string(),
    };
    let io_at = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExtractError::Io { path, source }
    };
    if safe_relative(Path::new(accession_id), "").is_none_or(|p| p.components().count() != 1) {
        return Err(ExtractError::Security {
            archive: archive.to_path_buf(),
            member: accession_id.to_string(),
        });
    }

    let mut plan: Vec<PathBuf> = Vec::new();
    let mut tar = open_archive(archive).map_err(io_at(archive))?;
    for entry in tar.entries().map_err(corrupt)? {
        let entry = entry.map_err(corrupt)?;
        let name = entry.path().map_err(corrupt)?.into_owned();
        let rel = safe_relative(&name, accession_id).ok_or_else(|| ExtractError::Security {
            archive: archive.to_path_buf(),
            member: name.to_string_lossy().into_owned(),
        })?;
        if entry.header().entry_type().is_file()
            && rel.file_name().is_some_and(|n| policy.keeps(&n.to_string_lossy()))
        {
            plan.push(rel);
        }
    }

    let target = dest_root.join(accession_id);
    let staging = dest_root.join(format!(".staging-{accession_id}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_at(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_at(&staging))?;
    let keep: BTreeSet<&PathBuf> = plan.iter().collect();
    let mut tar = open_archive(archive).map_err(io_at(archive))?;
    let result = (|| {
        for entry in tar.entries().map_err(corrupt)? {
            let mut entry = entry.map_err(corrupt)?;
            let name = entry.path().map_err(corrupt)?.into_owned();
            let Some(rel) = safe_relative(&name, accession_id) else {
                continue;
            };
            if !entry.header().entry_type().is_file() || !keep.contains(&rel) {
                continue;
            }
            let out = staging.join(&rel);
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(io_at(parent))?;
            }
            let mut file = File::create(&out).map_err(io_at(&out))?;
            io::copy(&mut entry, &mut file).map_err(corrupt)?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if target.exists() {
        fs::remove_dir_all(&target).map_err(io_at(&target))?;
    }
    fs::rename(&staging, &target).map_err(io_at(&target))?;

    let mut kept: Vec<PathBuf> = plan.into_iter().map(|rel| target.join(rel)).collect();
    kept.sort();
    kept.dedup();
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestStatus {
    Ok,
    Failed,
    Skipped,
}

/// One line of the ingest log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub entry: FileListEntry,
    pub status: IngestStatus,
    pub bytes: u64,
    pub attempts: u32,
    #[serde(default)]
    pub kept: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Layout of an ingest output directory.
#[derive(Debug, Clone)]
pub struct IngestLayout {
    pub root: PathBuf,
}

impl IngestLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn archives(&self) -> PathBuf {
        self.root.join("archives")
    }
    pub fn articles(&self) -> PathBuf {
        self.root.join("articles")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("ingest.jsonl")
    }
}

/// Fetches and extracts every entry with `workers` threads sharing one rate
/// gate, then writes the ingest log. Records follow file-list order.
pub fn ingest_all(
    entries: &[FileListEntry],
    policy: &DownloadPolicy,
    transport: &dyn Transport,
    layout: &IngestLayout,
    workers: usize,
) -> io::Result<Vec<IngestRecord>> {
    use rayon::prelude::*;

    let gate = policy.gate();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(io::Error::other)?;
    let records: Vec<IngestRecord> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| ingest_one(entry, policy, transport, &gate, layout))
            .collect()
    });
    write_atomic(&layout.log(), &crate::fsutil::to_jsonl(&records)?)?;
    Ok(records)
}

fn ingest_one(
    entry: &FileListEntry,
    policy: &DownloadPolicy,
    transport: &dyn Transport,
    gate: &RateGate,
    layout: &IngestLayout,
) -> IngestRecord {
    let mut record = IngestRecord {
        entry: entry.clone(),
        status: IngestStatus::Failed,
        bytes: 0,
        attempts: 0,
        kept: Vec::new(),
        error: None,
    };
    let fetched = match fetch_package(entry, policy, transport, gate, &layout.archives()) {
        Ok(f) => f,
        Err(e) => {
            if let FetchError::Exhausted { attempts, .. } = &e {
                record.attempts = *attempts;
            }
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.bytes = fetched.bytes;
    record.attempts = fetched.attempts;
    let articles = layout.articles();
    match extract_package(&fetched.path, &entry.accession_id, policy, &articles) {
        Ok(kept) => {
            record.kept = kept
                .iter()
                .map(|p| p.strip_prefix(&articles).unwrap_or(p).to_string_lossy().into_owned())
                .collect();
            record.status = match fetched.status {
                FetchStatus::Ok => IngestStatus::Ok,
                FetchStatus::Skipped => IngestStatus::Skipped,
            };
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "File,Citation,Accession_ID,Date,PMID,License\n";

    #[test]
    fn parses_rows_in_order() {
        let csv = format!(
            "{HEADER}oa/a.tar.gz,J 1(2),PMC1,2020-01-02,123,CC BY\noa/b.tar.gz,\"J, 3\",PMC2,2021-05-06 10:00:00,,CC0\n"
        );
        let rows = parse_file_list(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].pmid, Some(123));
        assert_eq!(rows[1].pmid, None);
        assert_eq!(rows[1].citation, "J, 3");
    }

    #[test]
    fn header_order_and_upstream_names() {
        let csv = "License,PMID,Last Updated (YYYY-MM-DD HH:MM:SS),Accession ID,Article Citation,File\nCC BY,PMID:7,2020-01-01 00:00:00,PMC9,Cit,x.tar.gz\n";
        let rows = parse_file_list(csv.as_bytes()).unwrap();
        assert_eq!(rows[0].accession_id, "PMC9");
        assert_eq!(rows[0].pmid, Some(7));
    }

    #[test]
    fn schema_and_row_errors() {
        let err = parse_file_list("File,Citation,Date,PMID,License\n".as_bytes()).unwrap_err();
        assert!(matches!(err, FileListError::MissingColumn("Accession_ID")));

        let dup = format!("{HEADER}a.tar.gz,c,PMC1,2020-01-01,,x\na.tar.gz,c,PMC2,2020-01-01,,x\n");
        match parse_file_list(dup.as_bytes()).unwrap_err() {
            FileListError::DuplicatePath { path, line, first_line } => {
                assert_eq!(path, "a.tar.gz");
                assert_eq!((first_line, line), (2, 3));
            }
            other => panic!("{other:?}"),
        }

        let ragged = format!("{HEADER}a.tar.gz,c,PMC1\n");
        assert!(matches!(
            parse_file_list(ragged.as_bytes()).unwrap_err(),
            FileListError::Csv { line: 2, .. }
        ));
        let bad_pmid = format!("{HEADER}a.tar.gz,c,PMC1,2020-01-01,abc,x\n");
        assert!(matches!(
            parse_file_list(bad_pmid.as_bytes()).unwrap_err(),
            FileListError::InvalidRow { line: 2, .. }
        ));
    }

    #[test]
    fn policy_defaults_and_validation() {
        let p = DownloadPolicy::default();
        assert!(p.validate().is_ok());
        assert!(p.keeps("fig1.JPG"));
        assert!(p.keeps("a.nxml"));
        assert!(!p.keeps("a.pdf"));
        assert!(!p.keeps("jpg"));
        let mut bad = p.clone();
        bad.max_requests_per_second = 0.0;
        assert_eq!(bad.validate(), Err(PolicyError::Rate(0.0)));
    }

    #[test]
    fn unsafe_member_names() {
        assert!(safe_relative(Path::new("../evil.jpg"), "PMC1").is_none());
        assert!(safe_relative(Path::new("/etc/passwd"), "PMC1").is_none());
        assert!(safe_relative(Path::new("a/../../b"), "PMC1").is_none());
        assert_eq!(
            safe_relative(Path::new("PMC1/fig1.jpg"), "PMC1"),
            Some(PathBuf::from("fig1.jpg"))
        );
        assert_eq!(safe_relative(Path::new("./x/y.nxml"), "PMC1"), Some(PathBuf::from("x/y.nxml")));
    }
}
