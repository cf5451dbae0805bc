//! Acceptance criteria. Runs without the test harness so each check prints
//! one PASS/FAIL line; exits non-zero if any check fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use litfig::core::eval::{bootstrap_ci, closed_vqa_accuracy, recall_at_k, wise_ft_merge, ClosedVqaItem, Direction, NamedParams, ParamArray};
use litfig::core::kmeans::{kmeans, KMeansConfig};
use litfig::core::license::{classify_license, LicenseGroup};
use litfig::core::linalg::Matrix;
use litfig::core::pca::fit_pca;
use litfig::core::vote::{field_disagreement, resolve_cluster, resolve_field, truncate_2dp, ClusterAnnotation, PanelType};
use litfig::demo::run_demo;
use litfig::fixtures::{bulk_articles, canned_records, demo_articles, file_list_csv, image_bytes, mock_transport, scripted_annotations};
use litfig::ingest::DownloadPolicy;
use litfig::samples::{FigureSample, METADATA_FIELDS};
use litfig::shards::{benchmark_io, stream_shards, write_loose_files, write_shards, ShardManifest, ShardSource, MANIFEST_FILE};
use litfig::stages::ingest_stage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn e2e_fixture() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = run_demo(dir.path()).map_err(|e| e.to_string())?;
    let manifest_path = out.manifest_path.clone();
    let streamed: Vec<FigureSample> = stream_shards(&ShardSource::Manifest(manifest_path.clone()))
        .map_err(|e| e.to_string())?
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let articles = demo_articles();
    let expected_keys: BTreeSet<String> = articles
        .iter()
        .flat_map(|a| a.figures.iter().map(move |f| format!("{}_{}", a.accession_id, f.image_id)))
        .collect();
    ensure!(articles.len() == 3 && expected_keys.len() == 7, "fixture shape changed");
    let got_keys: BTreeSet<String> = streamed.iter().map(|s| s.key.clone()).collect();
    ensure!(streamed.len() == 7, "streamed {} samples", streamed.len());
    ensure!(got_keys == expected_keys, "keys differ: {got_keys:?}");
    let groups: BTreeSet<String> = articles.iter().map(|a| license_oracle(&a.license).to_string()).collect();
    ensure!(groups.len() == 3, "fixture licenses are not mixed");

    // Majority label per cluster, counted directly from the scripted log.
    let mut majority: BTreeMap<u32, (String, String)> = BTreeMap::new();
    let mut by_cluster: BTreeMap<u32, Vec<ClusterAnnotation>> = BTreeMap::new();
    for a in scripted_annotations(3) {
        by_cluster.entry(a.cluster_id).or_default().push(a);
    }
    for (c, anns) in &by_cluster {
        let mut tally: BTreeMap<(String, String), usize> = BTreeMap::new();
        for a in anns {
            *tally.entry((a.global_labels[0].clone(), a.local_labels[0].clone())).or_default() += 1;
        }
        let (best, n) = tally.iter().max_by_key(|(_, n)| **n).unwrap();
        ensure!(*n >= 2, "scripted cluster {c} has no majority");
        majority.insert(*c, best.clone());
    }

    let records: BTreeMap<u64, _> = canned_records(&articles).into_iter().map(|r| (r.pmid, r)).collect();

    // Raw tar members, read independently of the streaming reader.
    let base = manifest_path.parent().unwrap();
    let manifest: Value = serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    let mut raw: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for s in manifest["shards"].as_array().unwrap() {
        let bytes = std::fs::read(base.join(s["path"].as_str().unwrap())).unwrap();
        ensure!(hex_sha(&bytes) == s["sha256"].as_str().unwrap(), "shard checksum mismatch");
        let mut ar = tar::Archive::new(&bytes[..]);
        for e in ar.entries().unwrap() {
            let mut e = e.unwrap();
            let name = e.path().unwrap().to_string_lossy().into_owned();
            let mut b = Vec::new();
            e.read_to_end(&mut b).unwrap();
            raw.insert(name, b);
        }
    }
    ensure!(raw.len() == 21, "tar members: {}", raw.len());

    for s in &streamed {
        let (a, f) = articles
            .iter()
            .flat_map(|a| a.figures.iter().map(move |f| (a, f)))
            .find(|(a, f)| format!("{}_{}", a.accession_id, f.image_id) == s.key)
            .unwrap();
        let m = &s.metadata;
        let image = s.image.bytes().unwrap();
        ensure!(image == image_bytes(a, f), "{}: image bytes differ", s.key);
        ensure!(raw[&format!("{}.jpg", s.key)] == image, "{}: tar image differs", s.key);
        ensure!(m["image_hash"] == json!(hex_sha(&image)), "{}: image_hash", s.key);
        let caption = f.caption.clone().unwrap_or_default();
        ensure!(s.caption == caption, "{}: caption {:?}", s.key, s.caption);
        ensure!(raw[&format!("{}.txt", s.key)] == caption.as_bytes(), "{}: tar caption differs", s.key);
        let tar_meta: Value = serde_json::from_slice(&raw[&format!("{}.json", s.key)]).unwrap();
        ensure!(tar_meta == Value::Object(m.clone()), "{}: metadata differs from the tar member", s.key);

        let keys: BTreeSet<&str> = m.keys().map(String::as_str).collect();
        ensure!(keys == METADATA_FIELDS.iter().copied().collect(), "{}: metadata fields {keys:?}", s.key);
        ensure!(m["article_title"] == json!(a.title), "{}: title", s.key);
        ensure!(m["article_abstract"] == json!(a.abstract_text), "{}: abstract", s.key);
        ensure!(m["article_journal"] == json!(a.journal), "{}: journal", s.key);
        ensure!(m["article_publication_date"] == json!(a.date), "{}: date", s.key);
        ensure!(m["article_citation"] == json!(a.citation), "{}: citation", s.key);
        ensure!(m["article_keywords"] == json!(a.keywords), "{}: keywords", s.key);
        ensure!(m["article_pmid"] == json!(a.pmid), "{}: pmid", s.key);
        ensure!(m["image_file_name"] == json!(format!("{}.jpg", f.image_id)), "{}: file name", s.key);
        ensure!(
            m["article_license"] == json!({"raw": a.license, "group": license_oracle(&a.license)}),
            "{}: license {}",
            s.key,
            m["article_license"]
        );
        match a.pmid.and_then(|p| records.get(&p)) {
            Some(r) => {
                ensure!(m["article_mesh_terms"] == json!(r.mesh_terms), "{}: mesh", s.key);
                ensure!(m["article_citing_pmids"] == json!(r.citing_pmids), "{}: citing", s.key);
                ensure!(m["article_citing_count"] == json!(r.citing_pmids.len()), "{}: citing count", s.key);
            }
            None => ensure!(m["article_mesh_terms"] == json!([]), "{}: mesh without pmid", s.key),
        }
        let cluster = m["image_cluster_id"].as_u64().ok_or(format!("{}: no cluster", s.key))? as u32;
        ensure!(cluster < 3, "{}: cluster {cluster}", s.key);
        let (g, l) = &majority[&cluster];
        ensure!(
            m["image_primary_label"] == json!({"global": g, "local": l}),
            "{}: label {}",
            s.key,
            m["image_primary_label"]
        );
        ensure!(m["image_features"].as_array().map(Vec::len) == Some(32), "{}: features", s.key);
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("7/7 samples round-trip, {:.2}s", elapsed.as_secs_f64()))
}

fn hex_sha(b: &[u8]) -> String {
    Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect()
}

fn license_oracle(raw: &str) -> &'static str {
    match raw {
        "CC0" | "CC BY" | "CC BY-SA" | "CC BY-ND" => "commercial",
        "CC BY-NC" | "CC BY-NC-SA" | "CC BY-NC-ND" => "noncommercial",
        _ => "other",
    }
}

fn license_table() -> Outcome {
    let table = [
        ("CC0", LicenseGroup::Commercial),
        ("CC BY", LicenseGroup::Commercial),
        ("CC BY-SA", LicenseGroup::Commercial),
        ("CC BY-ND", LicenseGroup::Commercial),
        ("CC BY-NC", LicenseGroup::Noncommercial),
        ("CC BY-NC-SA", LicenseGroup::Noncommercial),
        ("CC BY-NC-ND", LicenseGroup::Noncommercial),
        ("Other", LicenseGroup::Other),
    ];
    let wrong: Vec<_> = table
        .iter()
        .filter(|(raw, want)| classify_license(raw) != *want)
        .map(|(raw, _)| *raw)
        .collect();
    ensure!(wrong.is_empty(), "misclassified: {wrong:?}");
    Ok("8/8".into())
}

fn rate_limiter() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let articles = bulk_articles(50);
    let transport = mock_transport(&articles).unwrap();
    let list = dir.path().join("oa_file_list.csv");
    std::fs::write(&list, file_list_csv(&articles)).unwrap();
    let policy = DownloadPolicy::default();
    ensure!(policy.max_requests_per_second == 3.0, "default rate is not 3/s");
    let summary = ingest_stage(&list, &transport, &dir.path().join("ingest"), &policy, 8).map_err(|e| e.to_string())?;
    ensure!(summary.ok == 50, "fetched {} of 50", summary.ok);
    let mut times: Vec<Instant> = transport.requests().iter().map(|r| r.at).collect();
    times.sort();
    ensure!(times.len() >= 50, "only {} requests", times.len());
    let mut worst = 0;
    for (i, t) in times.iter().enumerate() {
        let n = times[i..].iter().take_while(|u| u.duration_since(*t) < Duration::from_secs(1)).count();
        worst = worst.max(n);
    }
    ensure!(worst <= 3, "a 1 s window holds {worst} requests");
    let span = times.last().unwrap().duration_since(times[0]);
    Ok(format!("{} requests over {:.2}s, busiest 1 s window {worst}", times.len(), span.as_secs_f64()))
}

fn pca_planted() -> Outcome {
    let (n, d, k) = (800, 80, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Random orthonormal basis for the signal subspace.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..d).map(|_| 0.02 * gaussian(&mut rng)).collect();
            for (j, b) in basis.iter().enumerate() {
                let z = (3.0 + j as f64 * 0.2) * gaussian(&mut rng);
                row.iter_mut().zip(b).for_each(|(r, v)| *r += z * v);
            }
            row
        })
        .collect();
    let model = fit_pca(&Matrix::from_rows(&rows), 1.0, Some(k)).map_err(|e| e.to_string())?;
    ensure!(model.components.len() == k, "kept {} components", model.components.len());

    // Total variance straight from the data.
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let total: f64 = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n - 1) as f64;
    let cumulative: f64 = model.explained_variance.iter().sum::<f64>() / total;
    let reported: f64 = model.explained_variance_ratio.iter().sum();
    ensure!(cumulative >= 0.99, "cumulative variance {cumulative}");
    ensure!((cumulative - reported).abs() < 1e-9, "reported ratio {reported} vs {cumulative}");
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = model.components[i].iter().zip(&model.components[j]).map(|(a, b)| a * b).sum();
            worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure!(worst <= 1e-6, "orthonormality error {worst}");
    Ok(format!("cumulative {cumulative:.5} at 25 components, orthonormality error {worst:.1e}"))
}

fn kmeans_blobs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..200 {
        let c = i % 2;
        let centre = if c == 0 { -5.0 } else { 5.0 };
        rows.push((0..4).map(|_| centre + gaussian(&mut rng)).collect::<Vec<f64>>());
        truth.push(c);
    }
    let x = Matrix::from_rows(&rows);
    let a = kmeans(&x, &KMeansConfig::new(2, 42)).map_err(|e| e.to_string())?;
    let b = kmeans(&x, &KMeansConfig::new(2, 42)).map_err(|e| e.to_string())?;
    ensure!(a.assignments == b.assignments, "assignments differ between identical seeds");
    let same_bits = a.centroids.as_slice().iter().zip(b.centroids.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
        && a.inertia.to_bits() == b.inertia.to_bits();
    ensure!(same_bits, "centroids or inertia differ bitwise between identical seeds");
    let direct = a.assignments.iter().zip(&truth).filter(|(p, t)| p == t).count();
    let agreement = direct.max(200 - direct) as f64 / 200.0;
    ensure!(agreement >= 0.99, "agreement {agreement}");
    Ok(format!("agreement {agreement:.3}, identical reruns"))
}

/// Every non-empty subset of `alphabet` with at most `max` labels.
fn label_sets(alphabet: &[&'static str], max: usize) -> Vec<Vec<&'static str>> {
    (1u32..1 << alphabet.len())
        .filter(|m| m.count_ones() as usize <= max)
        .map(|m| (0..alphabet.len()).filter(|i| m & (1 << i) != 0).map(|i| alphabet[i]).collect())
        .collect()
}

fn majority_vote() -> Outcome {
    let alphabet = ["alpha", "beta", "gamma", "delta"];
    let sets = label_sets(&alphabet, 3);
    let mut checked = 0usize;
    for annotators in 1..=3usize {
        let mut picks = Vec::new();
        multisets(sets.len(), annotators, 0, &mut picks, &mut |idx| {
            let answers: Vec<Vec<&str>> = idx.iter().map(|&i| sets[i].clone()).collect();
            checked += 1;
            check_vote(&answers)
        })?;
    }
    let expected: usize = (1..=3).map(|m| binomial(sets.len() + m - 1, m)).sum();
    ensure!(checked == expected, "enumerated {checked} multisets, expected {expected}");
    Ok(format!("{checked} multisets, 100% match"))
}

/// Calls `visit` with every non-decreasing index sequence of length `len`
/// over `0..n`.
fn multisets(
    n: usize,
    len: usize,
    from: usize,
    picks: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]) -> Result<(), String>,
) -> Result<(), String> {
    if picks.len() == len {
        return visit(picks);
    }
    for i in from..n {
        picks.push(i);
        multisets(n, len, i, picks, visit)?;
        picks.pop();
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn check_vote(answers: &[Vec<&str>]) -> Result<(), String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        for l in a {
            *counts.entry(l).or_default() += 1;
        }
    }
    let top = *counts.values().max().unwrap();
    let primary = *counts.iter().find(|(_, c)| **c == top).unwrap().0;
    let accepted: BTreeSet<&str> = counts
        .iter()
        .filter(|(l, c)| **l == primary || answers.len() == 1 || **c >= 2)
        .map(|(l, _)| *l)
        .collect();
    let needs_review = answers.len() == 1 || counts.values().any(|c| *c == 1);

    let got = resolve_field(answers, |_| None);
    let got_accepted: BTreeSet<&str> = std::iter::once(got.primary.as_str()).chain(got.secondary.iter().map(String::as_str)).collect();
    ensure!(got.primary == primary, "{answers:?}: primary {} != {primary}", got.primary);
    ensure!(got_accepted == accepted, "{answers:?}: accepted {got_accepted:?} != {accepted:?}");

    let anns: Vec<ClusterAnnotation> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| ClusterAnnotation {
            annotator_id: format!("ann-{i}"),
            cluster_id: 0,
            panel_type: PanelType::Single,
            global_labels: vec!["Microscopy".into()],
            local_labels: a.iter().map(|s| s.to_string()).collect(),
            submitted_at: String::new(),
        })
        .collect();
    let r = resolve_cluster(&anns).map_err(|e| e.to_string())?;
    ensure!(r.needs_review == needs_review, "{answers:?}: needs_review {}", r.needs_review);
    ensure!(r.primary_local == primary, "{answers:?}: cluster primary {}", r.primary_local);
    Ok(())
}

fn disagreement() -> Outcome {
    let unanimous = field_disagreement(&[vec!["a"], vec!["a"], vec!["a"]]);
    let third = truncate_2dp(field_disagreement(&[vec!["a"], vec!["b"], vec!["c"]]));
    let quarter = truncate_2dp(field_disagreement(&[vec!["a"], vec!["b"], vec!["c"], vec!["d"]]));
    ensure!(unanimous == 0.0, "unanimous {unanimous}");
    ensure!(third == 66.66, "1/3 majority {third}");
    ensure!(quarter == 75.0, "1/4 majority {quarter}");
    Ok(format!("{unanimous}, {third}, {quarter}"))
}

fn serializer_determinism() -> Outcome {
    let samples = common::synthetic_samples(1000, 256, 3);
    let mut reference: Option<(Vec<u8>, Vec<Vec<(String, u64, u32, u64, u64, u64)>>)> = None;
    for workers in [1, 2, 4, 8] {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards(&samples, dir.path(), 64, workers, "all", json!(null)).map_err(|e| e.to_string())?;
        let manifest = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let listings: Vec<_> = m.shards.iter().map(|s| common::tar_listing(&dir.path().join(&s.path))).collect();
        ensure!(listings.iter().map(Vec::len).sum::<usize>() == 3000, "member count with {workers} workers");
        match &reference {
            None => reference = Some((manifest, listings)),
            Some((rm, rl)) => {
                ensure!(*rm == manifest, "manifest differs with {workers} workers");
                ensure!(*rl == listings, "tar listing differs with {workers} workers");
            }
        }
    }
    let shards = reference.unwrap().1.len();
    Ok(format!("1000 samples, {shards} shards, identical for 1/2/4/8 workers"))
}

fn streaming_benchmark() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let samples = common::synthetic_samples(10_000, 4096, 9);
    let shards = dir.path().join("shards");
    write_shards(&samples, &shards, 1000, 4, "all", json!(null)).map_err(|e| e.to_string())?;
    let loose = write_loose_files(&samples, &dir.path().join("loose")).map_err(|e| e.to_string())?;
    drop(samples);
    let manifest = shards.join(MANIFEST_FILE);
    ensure!(ShardManifest::load(&manifest).unwrap().total_samples == 10_000, "manifest total");
    let r = benchmark_io(&manifest, &loose, 1).map_err(|e| e.to_string())?;
    let line = format!(
        "sequential {:.0} samples/s ({:.1} MB/s), random {:.0} samples/s ({:.1} MB/s), ratio {:.2}, cold cache {}/{}",
        r.sequential.samples_per_sec,
        r.sequential.mb_per_sec,
        r.random.samples_per_sec,
        r.random.mb_per_sec,
        r.ratio,
        r.sequential.cold_cache,
        r.random.cold_cache
    );
    ensure!(r.sequential.samples == 10_000 && r.random.samples == 10_000, "sample counts: {line}");
    ensure!(r.ratio > 1.0, "{line}");
    Ok(line)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn eval_harness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut notes = Vec::new();
    for m in [4usize, 2] {
        let n = 10_000;
        let items: Vec<ClosedVqaItem> = (0..n)
            .map(|_| ClosedVqaItem {
                image_embedding: unit_vector(&mut rng, 16),
                answer_texts: Vec::new(),
                answer_embeddings: (0..m).map(|_| unit_vector(&mut rng, 16)).collect(),
                correct_index: rng.random_range(0..m),
                permutation_seed: 0,
            })
            .collect();
        let acc = closed_vqa_accuracy(&items).map_err(|e| e.to_string())?.accuracy;
        let p = 1.0 / m as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        ensure!((acc - p).abs() <= 3.0 * se, "M={m}: accuracy {acc} vs {p} (3 SE = {})", 3.0 * se);
        notes.push(format!("M={m} acc {:.2}%", acc * 100.0));
    }

    let n = 100;
    let images: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(&mut rng, 8)).collect();
    let texts: Vec<Vec<f64>> = images
        .iter()
        .map(|v| v.iter().map(|x| x + 0.6 * gaussian(&mut rng)).collect())
        .collect();
    for direction in [Direction::ImageToText, Direction::TextToImage] {
        let (q, c) = match direction {
            Direction::ImageToText => (&images, &texts),
            Direction::TextToImage => (&texts, &images),
        };
        for k in [1, 5, 10, 50, 100] {
            let mut hits = 0;
            for i in 0..n {
                let cos = |a: &[f64], b: &[f64]| {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                };
                let own = cos(&q[i], &c[i]);
                let better = c.iter().enumerate().filter(|&(j, cj)| j != i && cos(&q[i], cj) > own).count();
                if better < k {
                    hits += 1;
                }
            }
            let want = hits as f64 / n as f64;
            let got = recall_at_k(&images, &texts, direction, k).map_err(|e| e.to_string())?.recall;
            ensure!(got == want, "{direction:?} R@{k}: {got} vs oracle {want}");
        }
    }
    notes.push("recall@k matches oracle".into());

    let (lo, hi) = bootstrap_ci(&[0.75; 200], 1000, 0.95, 3).map_err(|e| e.to_string())?;
    ensure!(lo == hi && lo == 0.75, "constant CI [{lo}, {hi}]");
    notes.push("constant CI zero width".into());

    let mut base = NamedParams::new();
    let mut adapted = NamedParams::new();
    for (name, shape) in [("w", vec![3, 4]), ("b", vec![4]), ("scale", vec![1])] {
        let len: usize = shape.iter().product();
        let mut draw = || ParamArray {
            shape: shape.clone(),
            values: (0..len).map(|_| 10.0 * gaussian(&mut rng)).collect(),
        };
        base.insert(name.to_string(), draw());
        adapted.insert(name.to_string(), draw());
    }
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, p: &NamedParams| {
        let path = dir.path().join(name);
        std::fs::write(&path, serde_json::to_vec(p).unwrap()).unwrap();
        path
    };
    let (bp, ap) = (write("base.json", &base), write("adapted.json", &adapted));
    for alpha in [0.0, 0.5, 1.0] {
        let merged = wise_ft_merge(&base, &adapted, alpha).map_err(|e| e.to_string())?;
        let from_files = litfig::evalio::merge_param_files(&bp, &ap, alpha, &dir.path().join("merged.json")).map_err(|e| e.to_string())?;
        ensure!(merged == from_files, "file merge differs at alpha {alpha}");
        for (name, b) in &base {
            let a = &adapted[name];
            let got = &merged[name];
            ensure!(got.shape == b.shape, "{name}: shape");
            for ((g, x), y) in got.values.iter().zip(&b.values).zip(&a.values) {
                let want = (1.0 - alpha) * x + alpha * y;
                ensure!((g - want).abs() <= 1e-12, "{name} at alpha {alpha}: {g} vs {want}");
            }
        }
    }
    notes.push("merge within 1e-12".into());
    Ok(notes.join(", "))
}

fn run_check(name: &str, f: fn() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS  {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("e2e-fixture-roundtrip", e2e_fixture),
        ("license-table", license_table),
        ("rate-limiter-window", rate_limiter),
        ("pca-planted-signal", pca_planted),
        ("kmeans-blobs-determinism", kmeans_blobs),
        ("majority-vote-exhaustive", majority_vote),
        ("disagreement-extremes", disagreement),
        ("serializer-determinism", serializer_determinism),
        ("streaming-benchmark", streaming_benchmark),
        ("eval-harness", eval_harness),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(name, f)| !run_check(name, *f))
        .map(|(name, _)| *name)
        .collect();
    println!("{} of {} criteria passed", checks.len() - failed.len(), checks.len());
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
