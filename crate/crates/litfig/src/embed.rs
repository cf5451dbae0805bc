//! Image embeddings: backends, the embedding matrix, and its binary file
//! format (little-endian f32 values plus a JSON header and a key list).

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use litfig_core::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsutil::{write_atomic, write_json_atomic};

pub trait EmbeddingBackend: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, String>;
}

/// Deterministic test backend: a unit vector drawn from a generator seeded
/// by the SHA-256 of the image bytes. Equal bytes give equal rows.
#[derive(Debug, Clone, Copy)]
pub struct HashBackend {
    pub dim: usize,
}

impl EmbeddingBackend for HashBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, String> {
        let digest = Sha256::digest(image);
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

/// Talks to a long-running child process over stdin/stdout.
///
/// Request: `u32` LE byte length, then the image bytes. Response: `u32` LE
/// dimension `d`, then `d` LE `f32` values; `d = 0` means the worker could
/// not embed that image.
pub struct ProcessBackend {
    dim: usize,
    io: Mutex<(Child, BufWriter<ChildStdin>, BufReader<ChildStdout>)>,
}

impl ProcessBackend {
    pub fn spawn(program: &str, args: &[String], dim: usize) -> io::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            dim,
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        if let Ok(mut g) = self.io.lock() {
            let _ = g.1.flush();
            let _ = g.0.kill();
            let _ = g.0.wait();
        }
    }
}

impl EmbeddingBackend for ProcessBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, String> {
        let mut g = self.io.lock().map_err(|_| "worker lock poisoned".to_string())?;
        let (_, stdin, stdout) = &mut *g;
        let len = u32::try_from(image.len()).map_err(|_| "image larger than 4 GiB".to_string())?;
        let io = |e: io::Error| format!("embedding worker: {e}");
        stdin.write_all(&len.to_le_bytes()).map_err(io)?;
        stdin.write_all(image).map_err(io)?;
        stdin.flush().map_err(io)?;
        let mut word = [0u8; 4];
        stdout.read_exact(&mut word).map_err(io)?;
        let d = u32::from_le_bytes(word) as usize;
        if d == 0 {
            return Err("worker could not embed the image".into());
        }
        if d != self.dim {
            return Err(format!("worker returned dimension {d}, expected {}", self.dim));
        }
        let mut buf = vec![0u8; d * 4];
        stdout.read_exact(&mut buf).map_err(io)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Serves the worker protocol with `backend` until stdin closes.
pub fn serve_worker<R: Read, W: Write>(backend: &dyn EmbeddingBackend, input: R, output: W) -> io::Result<()> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    loop {
        let mut word = [0u8; 4];
        match input.read_exact(&mut word) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return output.flush(),
            Err(e) => return Err(e),
        }
        let mut image = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut image)?;
        match backend.embed(&image) {
            Ok(v) => {
                output.write_all(&(v.len() as u32).to_le_bytes())?;
                for x in v {
                    output.write_all(&x.to_le_bytes())?;
                }
            }
            Err(_) => output.write_all(&0u32.to_le_bytes())?,
        }
        output.flush()?;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub d: usize,
    /// Row-major, `row_keys.len() * d` values.
    pub values: Vec<f32>,
    pub row_keys: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("row {row} ({key}) has a non-finite value")]
    NonFinite { row: usize, key: String },
    #[error("duplicate row key {0:?}")]
    DuplicateKey(String),
    #[error("row key {0:?} contains a line break")]
    BadKey(String),
    #[error("expected {expected} values, found {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad header: {message}")]
    Header { path: PathBuf, message: String },
}

impl EmbeddingMatrix {
    pub fn new(d: usize, values: Vec<f32>, row_keys: Vec<String>) -> Result<Self, EmbeddingError> {
        let m = Self { d, values, row_keys };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.row_keys.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.values.len() != self.n() * self.d {
            return Err(EmbeddingError::Shape {
                expected: self.n() * self.d,
                actual: self.values.len(),
            });
        }
        let mut seen = HashSet::new();
        for (row, key) in self.row_keys.iter().enumerate() {
            if !seen.insert(key.as_str()) {
                return Err(EmbeddingError::DuplicateKey(key.clone()));
            }
            if key.contains(['\n', '\r']) {
                return Err(EmbeddingError::BadKey(key.clone()));
            }
            if self.row(row).iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { row, key: key.clone() });
            }
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_row_major(self.n(), self.d, self.values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.row_keys.iter().position(|k| k == key)
    }
}

/// JSON header stored next to the raw values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    /// File name (relative to the header) of the raw values.
    pub values_file: String,
    /// File name (relative to the header) of the newline-separated row keys.
    pub row_keys_file: String,
    #[serde(default)]
    pub skipped: Vec<String>,
}

/// Writes `<stem>.json`, `<stem>.f32` and `<stem>.keys` into `dir`.
pub fn save_embeddings(
    m: &EmbeddingMatrix,
    skipped: &[String],
    dir: &Path,
    stem: &str,
) -> Result<PathBuf, EmbeddingError> {
    let io_at = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmbeddingError::Io { path, source }
    };
    let values_file = format!("{stem}.f32");
    let keys_file = format!("{stem}.keys");
    let header_path = dir.join(format!("{stem}.json"));
    let mut raw = Vec::with_capacity(m.values.len() * 4);
    for v in &m.values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let p = dir.join(&values_file);
    write_atomic(&p, &raw).map_err(io_at(&p))?;
    let mut keys = String::new();
    for k in &m.row_keys {
        keys.push_str(k);
        keys.push('\n');
    }
    let p = dir.join(&keys_file);
    write_atomic(&p, keys.as_bytes()).map_err(io_at(&p))?;
    let header = EmbeddingHeader {
        n: m.n(),
        d: m.d,
        dtype: "f32le".into(),
        values_file,
        row_keys_file: keys_file,
        skipped: skipped.to_vec(),
    };
    write_json_atomic(&header_path, &header).map_err(io_at(&header_path))?;
    Ok(header_path)
}

/// Loads embeddings from a header written by [`save_embeddings`].
pub fn load_embeddings(header_path: &Path) -> Result<(EmbeddingMatrix, EmbeddingHeader), EmbeddingError> {
    let io_at = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmbeddingError::Io { path, source }
    };
    let header: EmbeddingHeader = crate::fsutil::read_json(header_path).map_err(io_at(header_path))?;
    if header.dtype != "f32le" {
        return Err(EmbeddingError::Header {
            path: header_path.to_path_buf(),
            message: format!("unsupported dtype {}", header.dtype),
        });
    }
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let kp = dir.join(&header.row_keys_file);
    let keys: Vec<String> = BufReader::new(fs::File::open(&kp).map_err(io_at(&kp))?)
        .lines()
        .collect::<io::Result<_>>()
        .map_err(io_at(&kp))?;
    let vp = dir.join(&header.values_file);
    let raw = fs::read(&vp).map_err(io_at(&vp))?;
    if raw.len() % 4 != 0 {
        return Err(EmbeddingError::Shape {
            expected: header.n * header.d,
            actual: raw.len() / 4,
        });
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if keys.len() != header.n {
        return Err(EmbeddingError::Header {
            path: header_path.to_path_buf(),
            message: format!("header says {} rows, key file has {}", header.n, keys.len()),
        });
    }
    let m = EmbeddingMatrix::new(header.d, values, keys)?;
    Ok((m, header))
}

/// Outcome of embedding a stream of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub matrix: EmbeddingMatrix,
    /// Keys whose image could not be read or embedded, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Embeds `(key, image path)` pairs in parallel; rows follow input order.
pub fn embed_images(images: &[(String, PathBuf)], backend: &dyn EmbeddingBackend) -> Embedded {
    use rayon::prelude::*;

    let rows: Vec<Result<Vec<f32>, String>> = images
        .par_iter()
        .map(|(_, path)| {
            let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let v = backend.embed(&bytes)?;
            if v.len() != backend.dim() {
                return Err(format!("backend returned {} values, expected {}", v.len(), backend.dim()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err("backend returned a non-finite value".into());
            }
            Ok(v)
        })
        .collect();
    let mut values = Vec::new();
    let mut keys = Vec::new();
    let mut skipped = Vec::new();
    for ((key, _), row) in images.iter().zip(rows) {
        match row {
            Ok(v) => {
                values.extend(v);
                keys.push(key.clone());
            }
            Err(reason) => skipped.push((key.clone(), reason)),
        }
    }
    Embedded {
        matrix: EmbeddingMatrix {
            d: backend.dim(),
            values,
            row_keys: keys,
        },
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Picky;
    impl EmbeddingBackend for Picky {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, image: &[u8]) -> Result<Vec<f32>, String> {
            if image == b"bad" {
                Err("unreadable".into())
            } else {
                Ok(vec![image.len() as f32, 1.0])
            }
        }
    }

    #[test]
    fn hash_backend_is_deterministic_unit() {
        let b = HashBackend { dim: 16 };
        let v = b.embed(b"abc").unwrap();
        assert_eq!(v, b.embed(b"abc").unwrap());
        assert_ne!(v, b.embed(b"abd").unwrap());
        let n: f32 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn failures_go_to_skip_list() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        for (i, body) in [&b"a"[..], b"bb", b"bad", b"ccc", b"dddd"].iter().enumerate() {
            let p = dir.path().join(format!("{i}.jpg"));
            fs::write(&p, body).unwrap();
            images.push((format!("k{i}"), p));
        }
        let out = embed_images(&images, &Picky);
        assert_eq!(out.matrix.n(), 4);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, "k2");
        assert_eq!(out.matrix.row(2), &[3.0, 1.0]);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::new(3, vec![1.0, 2.0, 3.0, -0.5, 0.0, 1e-7], vec!["a".into(), "b".into()]).unwrap();
        let header = save_embeddings(&m, &["c".into()], dir.path(), "emb").unwrap();
        let (back, h) = load_embeddings(&header).unwrap();
        assert_eq!(back, m);
        assert_eq!(h.skipped, vec!["c"]);
        assert!(matches!(
            EmbeddingMatrix::new(1, vec![1.0, f32::NAN], vec!["a".into(), "b".into()]),
            Err(EmbeddingError::NonFinite { row: 1, .. })
        ));
        assert!(matches!(
            EmbeddingMatrix::new(1, vec![1.0, 2.0], vec!["a".into(), "a".into()]),
            Err(EmbeddingError::DuplicateKey(_))
        ));
    }

    #[test]
    fn worker_protocol_round_trip() {
        let backend = HashBackend { dim: 4 };
        let mut request = Vec::new();
        for img in [&b"x"[..], b"yz"] {
            request.extend_from_slice(&(img.len() as u32).to_le_bytes());
            request.extend_from_slice(img);
        }
        let mut response = Vec::new();
        serve_worker(&backend, &request[..], &mut response).unwrap();
        assert_eq!(response.len(), 2 * (4 + 16));
        assert_eq!(u32::from_le_bytes(response[..4].try_into().unwrap()), 4);
        let first: Vec<f32> = response[4..20]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(first, backend.embed(b"x").unwrap());
    }
}
