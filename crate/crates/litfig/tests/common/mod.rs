#![allow(dead_code)]

use litfig::samples::{FigureSample, ImageSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

const GLOBALS: [&str; 3] = ["Microscopy", "Plots and Charts", "Maps"];

/// `n` samples with `image_len` pseudo-random image bytes each. Keys sort in
/// generation order.
pub fn synthetic_samples(n: usize, image_len: usize, seed: u64) -> Vec<FigureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut image = vec![0u8; image_len];
            rng.fill(&mut image[..]);
            let mut metadata = Map::new();
            metadata.insert("image_key".into(), json!(format!("PMC{i:07}_f1")));
            metadata.insert("article_pmid".into(), json!(1_000_000 + i));
            metadata.insert(
                "image_primary_label".into(),
                json!({"global": GLOBALS[i % 3], "local": "x"}),
            );
            metadata.insert("article_license".into(), json!({"raw": "CC BY", "group": "commercial"}));
            metadata.insert("image_features".into(), Value::Array((0..4).map(|j| json!(j as f64 * 0.5 - i as f64)).collect()));
            FigureSample {
                key: format!("PMC{i:07}_f1"),
                image: ImageSource::Bytes(image),
                caption: format!("Caption {i}: a plot of something ñ."),
                metadata,
            }
        })
        .collect()
}

/// Every entry of a tar file as (path, size, mode, mtime, uid, gid), read
/// straight from the archive headers.
pub fn tar_listing(path: &std::path::Path) -> Vec<(String, u64, u32, u64, u64, u64)> {
    let f = std::fs::File::open(path).unwrap();
    let mut ar = tar::Archive::new(f);
    ar.entries()
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let h = e.header();
            (
                e.path().unwrap().to_string_lossy().into_owned(),
                h.size().unwrap(),
                h.mode().unwrap(),
                h.mtime().unwrap(),
                h.uid().unwrap(),
                h.gid().unwrap(),
            )
        })
        .collect()
}
