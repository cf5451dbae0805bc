mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::time::Duration;

use litfig::cluster::{load_assignments, save_assignments};
use litfig::columnar::{write_columnar, ColumnarReader, Predicate};
use litfig::core::license::classify_license;
use litfig::entrez::{enrich_pmids, CannedRecord, MockService};
use litfig::fixtures::{article_nxml, bulk_articles, image_bytes, mock_transport, package_bytes, ArticleSpec, FigureSpec};
use litfig::ingest::{archive_path, extract_package, fetch_package, DownloadPolicy, FileListEntry};
use litfig::jats::{parse_article, ArticleDoc, FigureRecord};
use litfig::samples::FigureSample;
use litfig::shards::{stream_shards, write_shards, ShardSource, ShardStream, MANIFEST_FILE};
use litfig::store::{article_files, read_articles, write_article_jsonl};
use litfig::throttle::RateGate;
use proptest::prelude::*;
use serde_json::{json, Map, Value};

fn fast_policy(keep: &[&str]) -> DownloadPolicy {
    DownloadPolicy {
        max_requests_per_second: 10_000.0,
        rate_slack: Duration::ZERO,
        keep_extensions: keep.iter().map(|s| s.to_string()).collect(),
        ..DownloadPolicy::default()
    }
}

fn entry_for(a: &ArticleSpec) -> FileListEntry {
    FileListEntry {
        file_path: a.file_path(),
        citation: a.citation.clone(),
        accession_id: a.accession_id.clone(),
        date: a.date.clone(),
        pmid: a.pmid,
        license: a.license.clone(),
    }
}

/// Member names and bytes of a `.tar.gz`, read directly.
fn package_listing(bytes: &[u8]) -> BTreeMap<String, Vec<u8>> {
    let mut ar = tar::Archive::new(flate2::read::GzDecoder::new(bytes));
    ar.entries()
        .unwrap()
        .map(|e| {
            let mut e = e.unwrap();
            let name = e.path().unwrap().to_string_lossy().into_owned();
            let mut b = Vec::new();
            e.read_to_end(&mut b).unwrap();
            (name, b)
        })
        .collect()
}

fn figures() -> impl Strategy<Value = Vec<FigureSpec>> {
    let text = "[A-Za-z][A-Za-z0-9&<>]{0,8}( [A-Za-z0-9&<>]{1,6}){0,3}";
    prop::collection::vec((prop::option::of(text), prop::option::of(text), 1u16..2000, 1u16..2000), 1..6).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (caption, mention, width, height))| FigureSpec {
                image_id: format!("img-{i}"),
                fig_id: format!("F{i}"),
                caption,
                mention,
                in_xml: true,
                width,
                height,
            })
            .collect()
    })
}

fn spec_with(figures: Vec<FigureSpec>) -> ArticleSpec {
    let mut a = bulk_articles(1).remove(0);
    a.figures = figures;
    a
}

/// Text of every `<p>` in the raw XML that holds an xref pointing at `rid`.
fn raw_mentions(xml: &str, rid: &str) -> Vec<String> {
    let needle = format!("rid=\"{rid}\"");
    xml.split("<p>")
        .skip(1)
        .filter_map(|s| s.split("</p>").next())
        .filter(|p| p.contains(&needle) && p.contains("<xref"))
        .map(|p| p.to_string())
        .collect()
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&quot;", "\"").replace("&amp;", "&")
}

fn article_doc(i: usize, title: String, n_figs: usize, pmid: Option<u64>, score: f64) -> ArticleDoc {
    ArticleDoc {
        pmid,
        accession_id: format!("PMC{i:06}"),
        nxml: format!("PMC{i:06}.nxml"),
        title,
        abstract_text: format!("abstract {score}"),
        keywords: vec!["k".into(); i % 3],
        category: i.is_multiple_of(2).then(|| "Research Article".into()),
        full_text: "body ✓".into(),
        license_raw: "CC BY-NC".into(),
        license_group: classify_license("CC BY-NC"),
        figure_set: (0..n_figs)
            .map(|f| FigureRecord {
                image_id: format!("f{f}"),
                fig_id: Some(format!("F{f}")),
                image_file: format!("f{f}.jpg"),
                caption: format!("c {score}"),
                mentions: vec![],
                image_hash: String::new(),
                width: Some(f as u32),
                height: None,
                missing: f % 2 == 1,
            })
            .collect(),
        date: "2020-01-01".into(),
        journal: "J".into(),
        citation: String::new(),
        mesh_terms: vec![],
        citing_pmids: pmid.into_iter().collect(),
        citing_count: u64::from(pmid.is_some()),
    }
}

fn collect(stream: ShardStream) -> Vec<FigureSample> {
    stream.collect::<Result<_, _>>().unwrap()
}

fn same_samples(a: &[FigureSample], b: &[FigureSample]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.key == y.key && x.caption == y.caption && x.metadata == y.metadata && x.image.bytes().unwrap() == y.image.bytes().unwrap()
        })
}

fn columnar_rows() -> impl Strategy<Value = Vec<Map<String, Value>>> {
    let row = (
        prop::option::of(-50i64..50),
        prop::option::of(-5.0f64..5.0),
        prop::option::of(prop::sample::select(vec!["alpha", "beta", "gamma"])),
        any::<bool>(),
    );
    prop::collection::vec(row, 0..60).prop_map(|rows| {
        rows.into_iter()
            .map(|(n, x, s, b)| {
                let v = json!({"n": n, "x": x, "meta": {"s": s, "b": b}});
                v.as_object().unwrap().clone()
            })
            .collect()
    })
}

#[derive(Debug, Clone)]
enum Cond {
    NAtLeast(i64),
    XBelow(f64),
    SEquals(&'static str),
    BEquals(bool),
}

impl Cond {
    fn text(&self) -> String {
        match self {
            Cond::NAtLeast(k) => format!("n >= {k}"),
            Cond::XBelow(t) => format!("x < {t:?}"),
            Cond::SEquals(s) => format!("meta.s = '{s}'"),
            Cond::BEquals(b) => format!("meta.b = {b}"),
        }
    }

    fn holds(&self, r: &Map<String, Value>) -> bool {
        match self {
            Cond::NAtLeast(k) => r["n"].as_i64().is_some_and(|n| n >= *k),
            Cond::XBelow(t) => r["x"].as_f64().is_some_and(|x| x < *t),
            Cond::SEquals(s) => r["meta"]["s"] == *s,
            Cond::BEquals(b) => r["meta"]["b"] == *b,
        }
    }
}

fn conditions() -> impl Strategy<Value = Vec<Cond>> {
    let leaf = prop_oneof![
        (-50i64..50).prop_map(Cond::NAtLeast),
        (-5.0f64..5.0).prop_map(Cond::XBelow),
        prop::sample::select(vec!["alpha", "beta", "gamma"]).prop_map(Cond::SEquals),
        any::<bool>().prop_map(Cond::BEquals),
    ];
    prop::collection::vec(leaf, 1..3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn second_fetch_makes_no_requests(n in 1usize..5) {
        let dir = tempfile::tempdir().unwrap();
        let articles = bulk_articles(n);
        let t = mock_transport(&articles).unwrap();
        let policy = fast_policy(&["nxml", "jpg"]);
        let gate = RateGate::new(policy.max_requests_per_second, policy.rate_slack);
        for a in &articles {
            fetch_package(&entry_for(a), &policy, &t, &gate, dir.path()).unwrap();
        }
        let after_first = t.request_count();
        prop_assert!(after_first >= n);
        for a in &articles {
            fetch_package(&entry_for(a), &policy, &t, &gate, dir.path()).unwrap();
        }
        prop_assert_eq!(t.request_count(), after_first);
    }

    #[test]
    fn extraction_keeps_exactly_the_kept_members(figs in figures(), keep in prop::sample::subsequence(vec!["nxml", "jpg", "pdf"], 0..=3)) {
        let dir = tempfile::tempdir().unwrap();
        let a = spec_with(figs);
        let bytes = package_bytes(&a).unwrap();
        let archive = archive_path(&dir.path().join("archives"), &entry_for(&a));
        std::fs::create_dir_all(archive.parent().unwrap()).unwrap();
        std::fs::write(&archive, &bytes).unwrap();
        let written = extract_package(&archive, &a.accession_id, &fast_policy(&keep), &dir.path().join("media")).unwrap();

        let prefix = format!("{}/", a.accession_id);
        let expected: BTreeMap<String, Vec<u8>> = package_listing(&bytes)
            .into_iter()
            .filter(|(name, _)| keep.iter().any(|k| name.ends_with(&format!(".{k}"))))
            .map(|(name, b)| (name.trim_start_matches(&prefix).to_string(), b))
            .collect();
        let target = dir.path().join("media").join(&a.accession_id);
        let got: BTreeMap<String, Vec<u8>> = written
            .iter()
            .map(|p| (p.strip_prefix(&target).unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn figures_are_unique_and_mentions_cite_them(figs in figures()) {
        let dir = tempfile::tempdir().unwrap();
        let a = spec_with(figs);
        for f in &a.figures {
            std::fs::write(dir.path().join(format!("{}.jpg", f.image_id)), image_bytes(&a, f)).unwrap();
        }
        let xml = article_nxml(&a);
        let parsed = parse_article(xml.as_bytes(), dir.path()).unwrap();
        let ids: Vec<&str> = parsed.doc.figure_set.iter().map(|f| f.image_id.as_str()).collect();
        let unique: BTreeSet<&str> = ids.iter().copied().collect();
        prop_assert_eq!(ids.len(), unique.len());
        prop_assert_eq!(ids.len(), a.figures.len());
        for rec in &parsed.doc.figure_set {
            let spec = a.figures.iter().find(|f| f.image_id == rec.image_id).unwrap();
            let raw = raw_mentions(&xml, &spec.fig_id);
            prop_assert_eq!(rec.mentions.len(), raw.len());
            for (m, r) in rec.mentions.iter().zip(&raw) {
                let lead = unescape(r.split(" (<xref").next().unwrap());
                prop_assert!(m.starts_with(&lead), "{:?} does not start with {:?}", m, lead);
            }
            prop_assert_eq!(&rec.caption, &spec.caption.clone().unwrap_or_default());
            prop_assert_eq!(rec.width, Some(u32::from(spec.width)));
        }
    }

    #[test]
    fn batching_does_not_change_records(pmids in prop::collection::btree_set(1u64..400, 0..40), batch in 1usize..9) {
        let records: Vec<CannedRecord> = pmids
            .iter()
            .filter(|p| *p % 3 != 0)
            .map(|&p| CannedRecord { pmid: p, mesh_terms: vec![format!("M{}", p % 7)], citing_pmids: vec![p + 1000] })
            .collect();
        let pmids: Vec<u64> = pmids.into_iter().collect();
        let policy = fast_policy(&[]);
        let batched_svc = MockService::new(records.clone());
        let gate = RateGate::new(policy.max_requests_per_second, policy.rate_slack);
        let (batched, _) = enrich_pmids(&pmids, batch, &batched_svc, &gate, &policy.retry()).unwrap();
        let single_svc = MockService::new(records);
        let (single, _) = enrich_pmids(&pmids, pmids.len().max(1), &single_svc, &gate, &policy.retry()).unwrap();
        prop_assert_eq!(&batched, &single);
        prop_assert_eq!(batched.len(), pmids.len());
        prop_assert!(batched_svc.calls().iter().all(|(_, ids)| ids.len() <= batch));
    }

    #[test]
    fn article_files_round_trip_in_order(
        docs in prop::collection::vec(("\\PC{0,12}", 0usize..4, prop::option::of(1u64..1_000_000), -1e6f64..1e6), 0..30),
        per_file in 1usize..8,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let docs: Vec<ArticleDoc> = docs.into_iter().enumerate().map(|(i, (t, n, p, s))| article_doc(i, t, n, p, s)).collect();
        write_article_jsonl(&docs, dir.path(), per_file).unwrap();
        prop_assert_eq!(&read_articles(dir.path()).unwrap(), &docs);
        let mut concatenated = Vec::new();
        for f in article_files(dir.path()).unwrap() {
            let text = std::fs::read_to_string(&f).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            prop_assert!(lines.len() <= per_file);
            for l in lines {
                concatenated.push(serde_json::from_str::<ArticleDoc>(l).unwrap());
            }
        }
        prop_assert_eq!(concatenated, docs);
    }

    #[test]
    fn assignment_cache_round_trips(map in prop::collection::btree_map("[A-Za-z0-9_.,\" -]{1,16}", any::<u32>(), 0..50)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("assignments.csv");
        save_assignments(&map, &p).unwrap();
        prop_assert_eq!(load_assignments(&p).unwrap(), map);
    }

    #[test]
    fn shards_stream_back_identically(n in 0usize..40, per_shard in 1usize..9, workers in 1usize..5, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let samples = common::synthetic_samples(n, 37, seed);
        let m = write_shards(&samples, dir.path(), per_shard, workers, "all", json!(null)).unwrap();
        prop_assert_eq!(m.total_samples, n);
        let back = collect(stream_shards(&ShardSource::Manifest(dir.path().join(MANIFEST_FILE))).unwrap());
        prop_assert!(same_samples(&back, &samples));
    }

    #[test]
    fn resumed_stream_yields_the_rest(n in 1usize..30, per_shard in 1usize..7, stop_at in 0usize..30) {
        let dir = tempfile::tempdir().unwrap();
        let samples = common::synthetic_samples(n, 11, 5);
        write_shards(&samples, dir.path(), per_shard, 2, "all", json!(null)).unwrap();
        let source = ShardSource::Manifest(dir.path().join(MANIFEST_FILE));
        let stop_at = stop_at.min(n);
        let mut s = stream_shards(&source).unwrap();
        for _ in 0..stop_at {
            s.next().unwrap().unwrap();
        }
        let cursor = s.position();
        drop(s);
        let rest = collect(ShardStream::resume(&source, cursor).unwrap());
        prop_assert!(same_samples(&rest, &samples[stop_at..]));
    }

    #[test]
    fn columnar_scan_matches_full_scan(rows in columnar_rows(), conds in conditions()) {
        let text = conds.iter().map(Cond::text).collect::<Vec<_>>().join(" and ");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.lfcol");
        let refs: Vec<&Map<String, Value>> = rows.iter().collect();
        write_columnar(&refs, &p).unwrap();
        let mut r = ColumnarReader::open(&p).unwrap();
        let pred = Predicate::parse(&text).unwrap();
        let hits = r.scan(&pred).unwrap();
        let want: Vec<usize> = rows.iter().enumerate().filter(|(_, row)| conds.iter().all(|c| c.holds(row))).map(|(i, _)| i).collect();
        prop_assert_eq!(&hits, &want, "{}", text);
        let all: Vec<usize> = (0..rows.len()).collect();
        prop_assert_eq!(r.read_rows(&all, None).unwrap(), rows);
    }
}
