//! Remote file access used by ingestion: an FTP backend, a local-directory
//! backend, and an in-process mock that records request times.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    /// Worth retrying: dropped connections, timeouts, busy servers.
    #[error("transient: {0}")]
    Transient(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Fatal(String),
}

/// Bytes of a retrieved file plus whatever the remote said to expect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    pub bytes: Vec<u8>,
    pub expected_len: Option<u64>,
    pub expected_sha256: Option<String>,
}

impl Retrieved {
    pub fn plain(bytes: Vec<u8>) -> Self {
        Self {
            bytes,
            expected_len: None,
            expected_sha256: None,
        }
    }
}

pub trait Transport: Send + Sync {
    /// Names directly under `dir`.
    fn list(&self, dir: &str) -> Result<Vec<String>, TransportError>;
    fn retrieve(&self, path: &str) -> Result<Retrieved, TransportError>;
    fn size(&self, path: &str) -> Result<u64, TransportError>;
}

/// Serves files from a local directory, e.g. a pre-synced mirror.
#[derive(Debug, Clone)]
pub struct LocalTransport {
    root: PathBuf,
}

impl LocalTransport {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, TransportError> {
        if path.split('/').any(|p| p == "..") {
            return Err(TransportError::Fatal(format!("refusing path {path:?}")));
        }
        Ok(self.root.join(path.trim_start_matches('/')))
    }
}

fn io_error(path: &str, e: std::io::Error) -> TransportError {
    match e.kind() {
        std::io::ErrorKind::NotFound => TransportError::NotFound(path.to_string()),
        std::io::ErrorKind::Interrupted | std::io::ErrorKind::TimedOut => {
            TransportError::Transient(format!("{path}: {e}"))
        }
        _ => TransportError::Fatal(format!("{path}: {e}")),
    }
}

impl Transport for LocalTransport {
    fn list(&self, dir: &str) -> Result<Vec<String>, TransportError> {
        let mut names: Vec<String> = fs::read_dir(self.resolve(dir)?)
            .map_err(|e| io_error(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    }

    fn retrieve(&self, path: &str) -> Result<Retrieved, TransportError> {
        let bytes = fs::read(self.resolve(path)?).map_err(|e| io_error(path, e))?;
        Ok(Retrieved {
            expected_len: Some(bytes.len() as u64),
            expected_sha256: None,
            bytes,
        })
    }

    fn size(&self, path: &str) -> Result<u64, TransportError> {
        Ok(fs::metadata(self.resolve(path)?)
            .map_err(|e| io_error(path, e))?
            .len())
    }
}

/// Anonymous FTP, one control connection per call.
#[derive(Debug, Clone)]
pub struct FtpTransport {
    addr: String,
    base: String,
}

impl FtpTransport {
    /// Accepts `ftp://host[:port]/base/dir`.
    pub fn from_url(url: &str) -> Result<Self, TransportError> {
        let rest = url
            .strip_prefix("ftp://")
            .ok_or_else(|| TransportError::Fatal(format!("not an ftp url: {url}")))?;
        let (host, base) = rest.split_once('/').unwrap_or((rest, ""));
        let addr = if host.contains(':') {
            host.to_string()
        } else {
            format!("{host}:21")
        };
        Ok(Self {
            addr,
            base: base.trim_end_matches('/').to_string(),
        })
    }

    fn remote(&self, path: &str) -> String {
        let path = path.trim_start_matches('/');
        if self.base.is_empty() {
            format!("/{path}")
        } else {
            format!("/{}/{path}", self.base)
        }
    }

    fn session<T>(
        &self,
        f: impl FnOnce(&mut suppaftp::FtpStream) -> suppaftp::FtpResult<T>,
    ) -> Result<T, TransportError> {
        let mut ftp = suppaftp::FtpStream::connect(&self.addr).map_err(ftp_error)?;
        ftp.login("anonymous", "anonymous@").map_err(ftp_error)?;
        ftp.transfer_type(suppaftp::types::FileType::Binary)
            .map_err(ftp_error)?;
        let out = f(&mut ftp).map_err(ftp_error);
        let _ = ftp.quit();
        out
    }
}

fn ftp_error(e: suppaftp::FtpError) -> TransportError {
    use suppaftp::FtpError;
    match &e {
        FtpError::ConnectionError(_) => TransportError::Transient(e.to_string()),
        FtpError::UnexpectedResponse(r) => {
            let code = r.status.code();
            if code == 550 {
                TransportError::NotFound(e.to_string())
            } else if (400..500).contains(&code) {
                TransportError::Transient(e.to_string())
            } else {
                TransportError::Fatal(e.to_string())
            }
        }
        _ => TransportError::Fatal(e.to_string()),
    }
}

impl Transport for FtpTransport {
    fn list(&self, dir: &str) -> Result<Vec<String>, TransportError> {
        let dir = self.remote(dir);
        self.session(|ftp| ftp.nlst(Some(&dir)))
    }

    fn retrieve(&self, path: &str) -> Result<Retrieved, TransportError> {
        let path = self.remote(path);
        self.session(|ftp| {
            let size = ftp.size(&path).ok().map(|s| s as u64);
            let bytes = ftp.retr_as_buffer(&path)?.into_inner();
            Ok(Retrieved {
                bytes,
                expected_len: size,
                expected_sha256: None,
            })
        })
    }

    fn size(&self, path: &str) -> Result<u64, TransportError> {
        let path = self.remote(path);
        self.session(|ftp| ftp.size(&path).map(|s| s as u64))
    }
}

/// Picks a backend from a mirror location: `ftp://...` or a local directory
/// (optionally written as `file://...`).
pub fn transport_for(location: &str) -> Result<Box<dyn Transport>, TransportError> {
    if location.starts_with("ftp://") {
        Ok(Box::new(FtpTransport::from_url(location)?))
    } else {
        let path = location.strip_prefix("file://").unwrap_or(location);
        Ok(Box::new(LocalTransport::new(path)))
    }
}

/// One request seen by [`MockTransport`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockRequest {
    pub at: Instant,
    pub op: &'static str,
    pub path: String,
}

#[derive(Debug, Default)]
struct MockState {
    files: BTreeMap<String, Vec<u8>>,
    failures: BTreeMap<String, u32>,
    bad_length: BTreeMap<String, u64>,
    log: Vec<MockRequest>,
}

/// In-memory remote for tests. Every call is timestamped on arrival.
#[derive(Debug, Default)]
pub struct MockTransport {
    state: Mutex<MockState>,
}

impl MockTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, path: &str, bytes: Vec<u8>) {
        self.state.lock().unwrap().files.insert(path.to_string(), bytes);
    }

    /// Makes the next `times` retrievals of `path` fail transiently.
    pub fn fail_next(&self, path: &str, times: u32) {
        self.state.lock().unwrap().failures.insert(path.to_string(), times);
    }

    /// Advertises a wrong length for `path`.
    pub fn advertise_length(&self, path: &str, len: u64) {
        self.state.lock().unwrap().bad_length.insert(path.to_string(), len);
    }

    pub fn requests(&self) -> Vec<MockRequest> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }

    fn record(&self, op: &'static str, path: &str) -> std::sync::MutexGuard<'_, MockState> {
        let mut s = self.state.lock().unwrap();
        s.log.push(MockRequest {
            at: Instant::now(),
            op,
            path: path.to_string(),
        });
        s
    }
}

impl Transport for MockTransport {
    fn list(&self, dir: &str) -> Result<Vec<String>, TransportError> {
        let s = self.record("list", dir);
        let prefix = if dir.is_empty() {
            String::new()
        } else {
            format!("{}/", dir.trim_end_matches('/'))
        };
        let mut names: Vec<String> = s
            .files
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix))
            .map(|rest| rest.split('/').next().unwrap_or(rest).to_string())
            .collect();
        names.dedup();
        Ok(names)
    }

    fn retrieve(&self, path: &str) -> Result<Retrieved, TransportError> {
        let mut s = self.record("retrieve", path);
        if let Some(n) = s.failures.get_mut(path) {
            if *n > 0 {
                *n -= 1;
                return Err(TransportError::Transient(format!("{path}: connection reset")));
            }
        }
        let bytes = s
            .files
            .get(path)
            .cloned()
            .ok_or_else(|| TransportError::NotFound(path.to_string()))?;
        let expected_len = Some(s.bad_length.get(path).copied().unwrap_or(bytes.len() as u64));
        Ok(Retrieved {
            bytes,
            expected_len,
            expected_sha256: None,
        })
    }

    fn size(&self, path: &str) -> Result<u64, TransportError> {
        let s = self.record("size", path);
        s.files
            .get(path)
            .map(|b| b.len() as u64)
            .ok_or_else(|| TransportError::NotFound(path.to_string()))
    }
}
