//! Tar shards of figure samples: `{key}.jpg`, `{key}.txt` and `{key}.json`
//! members per sample, a JSON manifest, streaming readback and an I/O
//! benchmark against loose per-sample files.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::fsutil::{read_json, write_json_atomic};
use crate::samples::{FigureSample, ImageSource};

pub const MANIFEST_FILE: &str = "manifest.json";
const MEMBER_EXTENSIONS: [&str; 3] = ["jpg", "txt", "json"];

pub fn shard_name(index: usize) -> String {
    format!("data-{index:06}.tar")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// File name relative to the manifest's directory.
    pub path: String,
    pub sample_count: usize,
    pub byte_size: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shards: Vec<ShardEntry>,
    pub total_samples: usize,
    pub subset_name: String,
    pub filter_spec: Value,
    /// Columnar metadata file, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columnar: Option<String>,
}

impl ShardManifest {
    pub fn validate(&self) -> Result<(), String> {
        let sum: usize = self.shards.iter().map(|s| s.sample_count).sum();
        if sum != self.total_samples {
            return Err(format!(
                "shard sample counts sum to {sum} but total_samples is {}",
                self.total_samples
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ShardError> {
        let m: Self = read_json(path).map_err(|source| ShardError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate().map_err(|message| ShardError::Manifest {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(m)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("sample {key}: {message}")]
    Sample { key: String, message: String },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{shard}: truncated or corrupt after byte offset {offset}: {message}")]
    Truncated { shard: PathBuf, offset: u64, message: String },
    #[error("{shard}: member at byte offset {offset}: {message}")]
    Format { shard: PathBuf, offset: u64, message: String },
    #[error("samples_per_shard and workers must be positive")]
    Parameters,
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
    written: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn member_header(len: usize) -> tar::Header {
    let mut h = tar::Header::new_gnu();
    h.set_size(len as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    h
}

fn write_one_shard(samples: &[FigureSample], path: &Path) -> Result<ShardEntry, ShardError> {
    let io_err = |source| ShardError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let hw = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
        written: 0,
    };
    let mut tar = tar::Builder::new(hw);
    tar.mode(tar::HeaderMode::Deterministic);
    for s in samples {
        let image = s.image.bytes().map_err(|e| ShardError::Sample {
            key: s.key.clone(),
            message: format!("reading image: {e}"),
        })?;
        let meta = serde_json::to_vec(&s.metadata).map_err(|e| ShardError::Sample {
            key: s.key.clone(),
            message: e.to_string(),
        })?;
        for (ext, bytes) in MEMBER_EXTENSIONS.iter().zip([&image[..], s.caption.as_bytes(), &meta[..]]) {
            let mut h = member_header(bytes.len());
            tar.append_data(&mut h, format!("{}.{ext}", s.key), bytes).map_err(io_err)?;
        }
    }
    let mut hw = tar.into_inner().map_err(io_err)?;
    hw.flush().map_err(io_err)?;
    let file = hw.inner.into_inner().map_err(|e| io_err(e.into_error()))?;
    file.sync_all().map_err(io_err)?;
    Ok(ShardEntry {
        path: path.file_name().expect("shard path has a name").to_string_lossy().into_owned(),
        sample_count: samples.len(),
        byte_size: hw.written,
        sha256: hex::encode(hw.hasher.finalize()),
    })
}

fn is_shard_name(name: &str) -> bool {
    name.len() == 15 && name.starts_with("data-") && name.ends_with(".tar") && name[5..11].bytes().all(|b| b.is_ascii_digit())
}

fn remove_shards(dir: &Path) -> io::Result<()> {
    for e in fs::read_dir(dir)? {
        let e = e?;
        if is_shard_name(&e.file_name().to_string_lossy()) {
            fs::remove_file(e.path())?;
        }
    }
    Ok(())
}

/// Writes `samples` into shards of `samples_per_shard` and the manifest.
///
/// Blocks are cut before any worker starts, so shard boundaries and bytes do
/// not depend on `workers`. On failure every shard of the run is removed.
pub fn write_shards(
    samples: &[FigureSample],
    out_dir: &Path,
    samples_per_shard: usize,
    workers: usize,
    subset_name: &str,
    filter_spec: Value,
) -> Result<ShardManifest, ShardError> {
    use rayon::prelude::*;

    if samples_per_shard == 0 || workers == 0 {
        return Err(ShardError::Parameters);
    }
    let io_at = |source| ShardError::Io {
        path: out_dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(out_dir).map_err(io_at)?;
    remove_shards(out_dir).map_err(io_at)?;
    let blocks: Vec<(usize, &[FigureSample])> = samples.chunks(samples_per_shard).enumerate().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| io_at(io::Error::other(e)))?;
    let results: Vec<Result<ShardEntry, ShardError>> = pool.install(|| {
        blocks
            .par_iter()
            .with_max_len(1)
            .map(|(i, block)| write_one_shard(block, &out_dir.join(shard_name(*i))))
            .collect()
    });
    let mut shards = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => shards.push(s),
            Err(e) => {
                let _ = remove_shards(out_dir);
                return Err(e);
            }
        }
    }
    let manifest = ShardManifest {
        shards,
        total_samples: samples.len(),
        subset_name: subset_name.to_string(),
        filter_spec,
        columnar: None,
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &ShardManifest, out_dir: &Path) -> Result<(), ShardError> {
    let path = out_dir.join(MANIFEST_FILE);
    write_json_atomic(&path, manifest).map_err(|source| ShardError::Io { path, source })
}

/// Member names of a shard, in archive order.
pub fn shard_members(path: &Path) -> Result<Vec<String>, ShardError> {
    let io_err = |source| ShardError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut ar = tar::Archive::new(BufReader::new(File::open(path).map_err(io_err)?));
    let mut out = Vec::new();
    for e in ar.entries().map_err(io_err)? {
        let e = e.map_err(io_err)?;
        out.push(e.path().map_err(io_err)?.to_string_lossy().into_owned());
    }
    Ok(out)
}

/// Position of the next sample: shard index and sample index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamCursor {
    pub shard: usize,
    pub sample: usize,
}

#[derive(Debug, Clone)]
struct ShardInput {
    path: PathBuf,
    expected: Option<usize>,
}

/// Where to stream from: a manifest or an explicit shard list.
#[derive(Debug, Clone)]
pub enum ShardSource {
    Manifest(PathBuf),
    Paths(Vec<PathBuf>),
}

const CHANNEL_DEPTH: usize = 64;

/// Samples in shard order. Each shard is read by a helper thread through a
/// bounded channel, so memory stays at a few samples regardless of shard
/// size.
pub struct ShardStream {
    inputs: Vec<ShardInput>,
    cursor: StreamCursor,
    rx: Option<Receiver<Result<FigureSample, ShardError>>>,
    failed: bool,
}

impl ShardStream {
    pub fn open(source: &ShardSource) -> Result<Self, ShardError> {
        Self::resume(source, StreamCursor::default())
    }

    pub fn resume(source: &ShardSource, cursor: StreamCursor) -> Result<Self, ShardError> {
        let inputs = match source {
            ShardSource::Manifest(path) => {
                let m = ShardManifest::load(path)?;
                let base = path.parent().unwrap_or(Path::new("."));
                m.shards
                    .iter()
                    .map(|s| ShardInput {
                        path: base.join(&s.path),
                        expected: Some(s.sample_count),
                    })
                    .collect()
            }
            ShardSource::Paths(paths) => paths
                .iter()
                .map(|p| ShardInput {
                    path: p.clone(),
                    expected: None,
                })
                .collect(),
        };
        Ok(Self {
            inputs,
            cursor,
            rx: None,
            failed: false,
        })
    }

    /// Cursor of the next sample to be yielded.
    pub fn position(&self) -> StreamCursor {
        self.cursor
    }

    fn start_shard(&mut self) {
        let input = self.inputs[self.cursor.shard].clone();
        let skip = self.cursor.sample;
        let (tx, rx) = sync_channel(CHANNEL_DEPTH);
        std::thread::spawn(move || {
            let sink = |item| tx.send(item).is_ok();
            let result = read_shard(&input.path, skip, &mut |s| sink(Ok(s)));
            match result {
                Ok(total) => {
                    if let Some(expected) = input.expected.filter(|&e| e != total) {
                        let offset = fs::metadata(&input.path).map(|m| m.len()).unwrap_or(0);
                        sink(Err(ShardError::Truncated {
                            shard: input.path.clone(),
                            offset,
                            message: format!("manifest lists {expected} samples, shard holds {total}"),
                        }));
                    }
                }
                Err(e) => {
                    sink(Err(e));
                }
            }
        });
        self.rx = Some(rx);
    }
}

impl Iterator for ShardStream {
    type Item = Result<FigureSample, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if self.cursor.shard >= self.inputs.len() {
                return None;
            }
            if self.rx.is_none() {
                self.start_shard();
            }
            match self.rx.as_ref().expect("receiver set").recv() {
                Ok(Ok(s)) => {
                    self.cursor.sample += 1;
                    return Some(Ok(s));
                }
                Ok(Err(e)) => {
                    self.failed = true;
                    return Some(Err(e));
                }
                Err(_) => {
                    self.rx = None;
                    self.cursor = StreamCursor {
                        shard: self.cursor.shard + 1,
                        sample: 0,
                    };
                }
            }
        }
    }
}

pub fn stream_shards(source: &ShardSource) -> Result<ShardStream, ShardError> {
    ShardStream::open(source)
}

/// Reads one shard, handing samples after the first `skip` to `emit` until
/// it returns false. Returns the number of samples in the shard.
fn read_shard(path: &Path, skip: usize, emit: &mut dyn FnMut(FigureSample) -> bool) -> Result<usize, ShardError> {
    let file = File::open(path).map_err(|source| ShardError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut ar = tar::Archive::new(BufReader::with_capacity(1 << 20, file));
    let mut good_end = 0u64;
    let truncated = |offset: u64, e: io::Error| ShardError::Truncated {
        shard: path.to_path_buf(),
        offset,
        message: e.to_string(),
    };
    let entries = ar.entries().map_err(|e| truncated(0, e))?;
    let mut parts: Vec<(String, Vec<u8>)> = Vec::with_capacity(3);
    let mut count = 0usize;
    let mut member_start = 0u64;
    for entry in entries {
        let mut entry = entry.map_err(|e| truncated(good_end, e))?;
        member_start = entry.raw_header_position();
        let name = entry.path().map_err(|e| truncated(member_start, e))?.to_string_lossy().into_owned();
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut bytes).map_err(|e| truncated(member_start, e))?;
        if (bytes.len() as u64) < entry.size() {
            return Err(truncated(member_start, io::Error::from(io::ErrorKind::UnexpectedEof)));
        }
        good_end = entry.raw_file_position() + entry.size();
        let want = MEMBER_EXTENSIONS[parts.len()];
        let (stem, ext) = name.rsplit_once('.').unwrap_or((&name, ""));
        let format_err = |message: String| ShardError::Format {
            shard: path.to_path_buf(),
            offset: member_start,
            message,
        };
        if ext != want {
            return Err(format_err(format!("expected a .{want} member, found {name:?}")));
        }
        if let Some((first, _)) = parts.first() {
            if first != stem {
                return Err(format_err(format!("member {name:?} does not belong to sample {first:?}")));
            }
        }
        parts.push((stem.to_string(), bytes));
        if parts.len() == 3 {
            let mut it = parts.drain(..);
            let (key, image) = it.next().expect("three parts");
            let (_, caption) = it.next().expect("three parts");
            let (_, meta) = it.next().expect("three parts");
            drop(it);
            if count >= skip {
                let caption = String::from_utf8(caption).map_err(|e| format_err(format!("caption is not UTF-8: {e}")))?;
                let metadata: Map<String, Value> =
                    serde_json::from_slice(&meta).map_err(|e| format_err(format!("metadata: {e}")))?;
                let sample = FigureSample {
                    key,
                    image: ImageSource::Bytes(image),
                    caption,
                    metadata,
                };
                if !emit(sample) {
                    return Ok(count + 1);
                }
            }
            count += 1;
        }
    }
    if !parts.is_empty() {
        return Err(ShardError::Truncated {
            shard: path.to_path_buf(),
            offset: member_start,
            message: format!("sample {:?} is missing members", parts[0].0),
        });
    }
    Ok(count)
}

/// Writes every sample as three loose files under `dir/<2 hex>/`, the
/// baseline layout for random access.
pub fn write_loose_files(samples: &[FigureSample], dir: &Path) -> Result<Vec<PathBuf>, ShardError> {
    let mut stems = Vec::with_capacity(samples.len());
    for s in samples {
        let bucket = &hex::encode(Sha256::digest(s.key.as_bytes()))[..2];
        let stem = dir.join(bucket).join(&s.key);
        let io_at = |source| ShardError::Io {
            path: stem.clone(),
            source,
        };
        fs::create_dir_all(stem.parent().expect("bucketed")).map_err(io_at)?;
        let image = s.image.bytes().map_err(io_at)?;
        let meta = serde_json::to_vec(&s.metadata).map_err(|e| io_at(io::Error::other(e)))?;
        for (ext, bytes) in MEMBER_EXTENSIONS.iter().zip([&image[..], s.caption.as_bytes(), &meta[..]]) {
            fs::write(stem.with_extension(ext), bytes).map_err(io_at)?;
        }
        stems.push(stem);
    }
    Ok(stems)
}

fn read_loose(stem: &Path) -> Result<(FigureSample, u64), ShardError> {
    let io_at = |source| ShardError::Io {
        path: stem.to_path_buf(),
        source,
    };
    let image = fs::read(stem.with_extension("jpg")).map_err(io_at)?;
    let caption = fs::read_to_string(stem.with_extension("txt")).map_err(io_at)?;
    let meta = fs::read(stem.with_extension("json")).map_err(io_at)?;
    let bytes = (image.len() + caption.len() + meta.len()) as u64;
    let metadata = serde_json::from_slice(&meta).map_err(|e| io_at(io::Error::other(e)))?;
    let key = stem.file_name().expect("stem").to_string_lossy().into_owned();
    Ok((
        FigureSample {
            key,
            image: ImageSource::Bytes(image),
            caption,
            metadata,
        },
        bytes,
    ))
}

/// Asks the kernel to drop cached pages of `path`. Best effort: returns
/// false where unsupported.
pub fn evict_from_cache(path: &Path) -> bool {
    #[cfg(target_os = "linux")]
    {
        use std::os::fd::AsRawFd;
        let Ok(f) = File::open(path) else { return false };
        let _ = f.sync_all();
        // SAFETY: the descriptor is valid for the lifetime of `f`.
        unsafe { libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) == 0 }
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = path;
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    SequentialShards,
    RandomFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: BenchMode,
    pub samples: usize,
    pub bytes: u64,
    pub seconds: f64,
    pub samples_per_sec: f64,
    pub mb_per_sec: f64,
    /// Whether every file was evicted from the page cache beforehand.
    pub cold_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sequential: ModeReport,
    pub random: ModeReport,
    /// Sequential samples/s over random samples/s.
    pub ratio: f64,
}

fn mode_report(mode: BenchMode, samples: usize, bytes: u64, seconds: f64, cold_cache: bool) -> ModeReport {
    let s = seconds.max(1e-9);
    ModeReport {
        mode,
        samples,
        bytes,
        seconds,
        samples_per_sec: samples as f64 / s,
        mb_per_sec: bytes as f64 / 1e6 / s,
        cold_cache,
    }
}

/// Reads every sample of the manifest's shards in order. Bytes are counted
/// as stored, tar headers included.
pub fn bench_sequential(manifest: &Path, evict: bool) -> Result<ModeReport, ShardError> {
    let m = ShardManifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut cold = evict;
    if evict {
        for s in &m.shards {
            cold &= evict_from_cache(&base.join(&s.path));
        }
    }
    let start = Instant::now();
    let mut n = 0;
    for s in stream_shards(&ShardSource::Manifest(manifest.to_path_buf()))? {
        s?;
        n += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    let bytes: u64 = m.shards.iter().map(|s| s.byte_size).sum();
    Ok(mode_report(BenchMode::SequentialShards, n, bytes, seconds, cold))
}

/// Reads every loose sample once, in a seeded random order.
pub fn bench_random(stems: &[PathBuf], seed: u64, evict: bool) -> Result<ModeReport, ShardError> {
    let mut order: Vec<&PathBuf> = stems.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cold = evict;
    if evict {
        for s in stems {
            for ext in MEMBER_EXTENSIONS {
                cold &= evict_from_cache(&s.with_extension(ext));
            }
        }
    }
    let start = Instant::now();
    let mut bytes = 0u64;
    for stem in &order {
        let (_, n) = read_loose(stem)?;
        bytes += n;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(mode_report(BenchMode::RandomFiles, order.len(), bytes, seconds, cold))
}

/// Compares sequential shard streaming with random per-file reads of the
/// same samples. Both modes decode full samples.
pub fn benchmark_io(manifest: &Path, loose: &[PathBuf], seed: u64) -> Result<BenchReport, ShardError> {
    let random = bench_random(loose, seed, true)?;
    let sequential = bench_sequential(manifest, true)?;
    Ok(BenchReport {
        ratio: sequential.samples_per_sec / random.samples_per_sec.max(1e-12),
        sequential,
        random,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::tests::synthetic;
    use serde_json::json;

    #[test]
    fn five_samples_two_per_shard() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic(5);
        let m = write_shards(&s, dir.path(), 2, 2, "all", json!(null)).unwrap();
        let counts: Vec<usize> = m.shards.iter().map(|x| x.sample_count).collect();
        assert_eq!(counts, vec![2, 2, 1]);
        assert_eq!(m.shards[2].path, "data-000002.tar");
        let members = shard_members(&dir.path().join("data-000000.tar")).unwrap();
        assert_eq!(
            members,
            vec!["PMC00000_fig.jpg", "PMC00000_fig.txt", "PMC00000_fig.json", "PMC00001_fig.jpg", "PMC00001_fig.txt", "PMC00001_fig.json"]
        );
        let back: Vec<FigureSample> = stream_shards(&ShardSource::Manifest(dir.path().join(MANIFEST_FILE)))
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let s = synthetic(23);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_shards(&s, a.path(), 4, 1, "all", json!(null)).unwrap();
        let mb = write_shards(&s, b.path(), 4, 4, "all", json!(null)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn truncation_names_shard_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic(4);
        write_shards(&s, dir.path(), 4, 1, "all", json!(null)).unwrap();
        let p = dir.path().join("data-000000.tar");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2 + 100]).unwrap();
        let results: Vec<_> = stream_shards(&ShardSource::Manifest(dir.path().join(MANIFEST_FILE))).unwrap().collect();
        let err = results.into_iter().find_map(Result::err).expect("an error");
        match err {
            ShardError::Truncated { shard, .. } => assert_eq!(shard, p),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_mid_shard() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic(7);
        write_shards(&s, dir.path(), 3, 2, "all", json!(null)).unwrap();
        let src = ShardSource::Manifest(dir.path().join(MANIFEST_FILE));
        let mut it = stream_shards(&src).unwrap();
        let first: Vec<_> = it.by_ref().take(4).map(Result::unwrap).collect();
        let cur = it.position();
        assert_eq!(cur, StreamCursor { shard: 1, sample: 1 });
        drop(it);
        let rest: Vec<_> = ShardStream::resume(&src, cur).unwrap().map(Result::unwrap).collect();
        let all: Vec<_> = first.into_iter().chain(rest).collect();
        assert_eq!(all, s);
    }
}
