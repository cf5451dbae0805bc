//! Article JSONL files and corpus statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use litfig_core::stats::Summary;
use serde::{Deserialize, Serialize};

use crate::entrez::EnrichmentRecord;
use crate::fsutil::{read_jsonl, write_atomic};
use crate::jats::ArticleDoc;

pub const DEFAULT_MAX_PER_FILE: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("serialising article {accession_id}: {source}")]
    Serialize {
        accession_id: String,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn article_file_name(index: usize) -> String {
    format!("articles-{index:05}.jsonl")
}

/// Writes `articles` in order into `articles-%05d.jsonl` files of at most
/// `max_per_file` lines each. Stale article files from an earlier run are
/// removed first.
pub fn write_article_jsonl(
    articles: &[ArticleDoc],
    out_dir: &Path,
    max_per_file: usize,
) -> Result<Vec<PathBuf>, StoreError> {
    let io_at = |path: &Path| {
        let path = path.to_path_buf();
        move |source| StoreError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    for old in article_files(out_dir).map_err(io_at(out_dir))? {
        fs::remove_file(&old).map_err(io_at(&old))?;
    }
    let mut paths = Vec::new();
    for (i, chunk) in articles.chunks(max_per_file.max(1)).enumerate() {
        let mut buf = Vec::new();
        for a in chunk {
            serde_json::to_writer(&mut buf, a).map_err(|source| StoreError::Serialize {
                accession_id: a.accession_id.clone(),
                source,
            })?;
            buf.push(b'\n');
        }
        let path = out_dir.join(article_file_name(i));
        write_atomic(&path, &buf).map_err(io_at(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Article files in `dir`, in name order.
pub fn article_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("articles-") && n.ends_with(".jsonl"))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_articles(dir: &Path) -> io::Result<Vec<ArticleDoc>> {
    let mut out = Vec::new();
    for path in article_files(dir)? {
        out.extend(read_jsonl::<ArticleDoc>(&path)?);
    }
    Ok(out)
}

/// Fills enrichment fields in every article file under `dir`, rewriting
/// each file through a temp file. Returns the number of articles updated.
pub fn apply_enrichment(dir: &Path, records: &BTreeMap<u64, EnrichmentRecord>) -> io::Result<usize> {
    let mut updated = 0;
    for path in article_files(dir)? {
        let mut articles: Vec<ArticleDoc> = read_jsonl(&path)?;
        for a in &mut articles {
            if let Some(r) = a.pmid.and_then(|p| records.get(&p)) {
                a.mesh_terms = r.mesh_terms.clone();
                a.citing_pmids = r.citing_pmids.clone();
                a.citing_count = r.citing_count;
                updated += 1;
            }
        }
        write_atomic(&path, &crate::fsutil::to_jsonl(&articles)?)?;
    }
    Ok(updated)
}

/// Maps text to tokens for length statistics.
pub trait Tokenizer: Sync {
    fn count(&self, text: &str) -> usize;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub empty: bool,
    pub articles_total: u64,
    pub articles_with_images: u64,
    pub articles_text_only: u64,
    /// Figures with a non-empty caption.
    pub pair_count: u64,
    pub figure_count: u64,
    pub mention_count: u64,
    pub caption_tokens: Summary,
    pub caption_chars: Summary,
    pub mention_tokens: Summary,
    pub mention_chars: Summary,
    pub full_text_tokens: Summary,
    pub full_text_chars: Summary,
    pub image_width: Summary,
    pub image_height: Summary,
    pub image_area: Summary,
    pub mesh_terms_per_article: Summary,
    pub citing_per_article: Summary,
}

#[derive(Default)]
struct Samples {
    articles: u64,
    with_images: u64,
    figures: u64,
    pairs: u64,
    caption_tokens: Vec<f64>,
    caption_chars: Vec<f64>,
    mention_tokens: Vec<f64>,
    mention_chars: Vec<f64>,
    full_tokens: Vec<f64>,
    full_chars: Vec<f64>,
    width: Vec<f64>,
    height: Vec<f64>,
    area: Vec<f64>,
    mesh: Vec<f64>,
    citing: Vec<f64>,
}

impl Samples {
    fn of(a: &ArticleDoc, tok: &dyn Tokenizer) -> Self {
        let mut s = Samples {
            articles: 1,
            with_images: u64::from(!a.figure_set.is_empty()),
            figures: a.figure_set.len() as u64,
            ..Samples::default()
        };
        s.full_tokens.push(tok.count(&a.full_text) as f64);
        s.full_chars.push(a.full_text.chars().count() as f64);
        s.mesh.push(a.mesh_terms.len() as f64);
        s.citing.push(a.citing_count as f64);
        for f in &a.figure_set {
            if !f.caption.is_empty() {
                s.pairs += 1;
                s.caption_tokens.push(tok.count(&f.caption) as f64);
                s.caption_chars.push(f.caption.chars().count() as f64);
            }
            for m in &f.mentions {
                s.mention_tokens.push(tok.count(m) as f64);
                s.mention_chars.push(m.chars().count() as f64);
            }
            if let (Some(w), Some(h)) = (f.width, f.height) {
                s.width.push(f64::from(w));
                s.height.push(f64::from(h));
                s.area.push(f64::from(w) * f64::from(h));
            }
        }
        s
    }

    fn merge(mut self, other: Self) -> Self {
        self.articles += other.articles;
        self.with_images += other.with_images;
        self.figures += other.figures;
        self.pairs += other.pairs;
        for (a, b) in [
            (&mut self.caption_tokens, other.caption_tokens),
            (&mut self.caption_chars, other.caption_chars),
            (&mut self.mention_tokens, other.mention_tokens),
            (&mut self.mention_chars, other.mention_chars),
            (&mut self.full_tokens, other.full_tokens),
            (&mut self.full_chars, other.full_chars),
            (&mut self.width, other.width),
            (&mut self.height, other.height),
            (&mut self.area, other.area),
            (&mut self.mesh, other.mesh),
            (&mut self.citing, other.citing),
        ] {
            a.extend(b);
        }
        self
    }
}

/// Exact corpus statistics. Per-article samples are gathered in parallel;
/// quantiles come from a full sort, so the result does not depend on thread
/// count.
pub fn compute_stats(articles: &[ArticleDoc], tokenizer: &dyn Tokenizer) -> CorpusStats {
    use rayon::prelude::*;

    let s = articles
        .par_iter()
        .map(|a| Samples::of(a, tokenizer))
        .reduce(Samples::default, Samples::merge);
    CorpusStats {
        empty: s.articles == 0,
        articles_total: s.articles,
        articles_with_images: s.with_images,
        articles_text_only: s.articles - s.with_images,
        pair_count: s.pairs,
        figure_count: s.figures,
        mention_count: s.mention_tokens.len() as u64,
        caption_tokens: Summary::of(&s.caption_tokens),
        caption_chars: Summary::of(&s.caption_chars),
        mention_tokens: Summary::of(&s.mention_tokens),
        mention_chars: Summary::of(&s.mention_chars),
        full_text_tokens: Summary::of(&s.full_tokens),
        full_text_chars: Summary::of(&s.full_chars),
        image_width: Summary::of(&s.width),
        image_height: Summary::of(&s.height),
        image_area: Summary::of(&s.area),
        mesh_terms_per_article: Summary::of(&s.mesh),
        citing_per_article: Summary::of(&s.citing),
    }
}

/// Frequency of each MeSH term across articles, most frequent first.
pub fn mesh_frequencies(articles: &[ArticleDoc]) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for a in articles {
        for t in &a.mesh_terms {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut out: Vec<(String, u64)> = counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
