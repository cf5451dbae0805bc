//! JATS article parsing: text fields, figures, captions and the paragraphs
//! that cite each figure.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use litfig_core::text::{join_fragments, lowercase_extension, split_idrefs, strip_image_extension, IMAGE_EXTENSIONS};
use litfig_core::{classify_license, LicenseGroup};
use roxmltree::{Document, Node, ParsingOptions};
use serde::{Deserialize, Serialize};

use crate::fsutil::{list_files, sha256_hex};

const XLINK: &str = "http://www.w3.org/1999/xlink";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRecord {
    /// Stem of the graphic's file name; the media key.
    pub image_id: String,
    /// `id` of the enclosing `<fig>`; the key used by cross-references.
    #[serde(default)]
    pub fig_id: Option<String>,
    /// Image path relative to the article's media directory.
    pub image_file: String,
    pub caption: String,
    #[serde(default)]
    pub mentions: Vec<String>,
    /// SHA-256 of the image bytes, empty when the file is missing.
    pub image_hash: String,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default)]
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleDoc {
    pub pmid: Option<u64>,
    pub accession_id: String,
    /// nXML file name inside the article directory.
    #[serde(default)]
    pub nxml: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub keywords: Vec<String>,
    pub category: Option<String>,
    pub full_text: String,
    pub license_raw: String,
    pub license_group: LicenseGroup,
    pub figure_set: Vec<FigureRecord>,
    pub date: String,
    pub journal: String,
    pub citation: String,
    #[serde(default)]
    pub mesh_terms: Vec<String>,
    #[serde(default)]
    pub citing_pmids: Vec<u64>,
    #[serde(default)]
    pub citing_count: u64,
}

impl ArticleDoc {
    pub fn set_license(&mut self, raw: &str) {
        self.license_raw = raw.to_string();
        self.license_group = classify_license(raw);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    AmbiguousCaption { image_id: String, figs: usize },
    MissingMedia { image_id: String, href: String },
    DuplicateGraphic { image_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedArticle {
    pub doc: ArticleDoc,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, thiserror::Error)]
pub enum JatsError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: usize, message: String },
    #[error("reading media {path}: {source}")]
    Media { path: PathBuf, source: std::io::Error },
}

fn byte_offset(text: &str, row: u32, col: u32) -> usize {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == row as usize {
            return offset
                + line
                    .char_indices()
                    .nth(col.saturating_sub(1) as usize)
                    .map_or(line.len(), |(b, _)| b);
        }
        offset += line.len();
    }
    text.len()
}

/// Parses nXML bytes. DTD declarations are tolerated.
pub fn parse_xml(bytes: &[u8]) -> Result<Document<'_>, JatsError> {
    let text = std::str::from_utf8(bytes).map_err(|e| JatsError::Xml {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let opts = ParsingOptions {
        allow_dtd: true,
        ..ParsingOptions::default()
    };
    Document::parse_with_options(text, opts).map_err(|e| {
        let pos = e.pos();
        JatsError::Xml {
            offset: byte_offset(text, pos.row, pos.col),
            message: e.to_string(),
        }
    })
}

/// Plain text of a subtree: text nodes joined by single spaces, whitespace
/// collapsed.
pub fn plain_text(node: Node<'_, '_>) -> String {
    join_fragments(node.descendants().filter(|n| n.is_text()).filter_map(|n| n.text()))
}

fn media_key(href: &str) -> &str {
    let stem = strip_image_extension(href);
    stem.rsplit('/').next().unwrap_or(stem)
}

fn href<'a>(node: Node<'a, '_>) -> Option<&'a str> {
    node.attribute((XLINK, "href")).or_else(|| node.attribute("href"))
}

fn named<'a, 'i>(node: Node<'a, 'i>, name: &'static str) -> impl Iterator<Item = Node<'a, 'i>> {
    node.descendants().filter(move |n| n.has_tag_name(name))
}

fn first<'a, 'i>(node: Node<'a, 'i>, name: &'static str) -> Option<Node<'a, 'i>> {
    named(node, name).next()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaptionMatch {
    pub caption: String,
    pub fig_id: Option<String>,
    /// Number of `<fig>` elements whose graphic matched.
    pub matches: usize,
}

/// Caption of the first `<fig>` holding a `<graphic>` whose href matches
/// `image_id`, both sides compared without file extension.
pub fn match_caption(doc: &Document<'_>, image_id: &str) -> CaptionMatch {
    let want = media_key(image_id);
    let mut out = CaptionMatch::default();
    for fig in named(doc.root(), "fig") {
        let hit = named(fig, "graphic").any(|g| href(g).is_some_and(|h| media_key(h) == want));
        if !hit {
            continue;
        }
        out.matches += 1;
        if out.matches == 1 {
            out.caption = first(fig, "caption").map(plain_text).unwrap_or_default();
            out.fig_id = fig.attribute("id").map(str::to_string);
        }
    }
    out
}

/// Paragraphs containing an `<xref ref-type="fig">` whose `rid` lists
/// `fig_rid`, in document order, each paragraph once.
pub fn extract_mentions(doc: &Document<'_>, fig_rid: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for xref in named(doc.root(), "xref") {
        if xref.attribute("ref-type") != Some("fig") {
            continue;
        }
        let cites = xref
            .attribute("rid")
            .is_some_and(|rid| split_idrefs(rid).contains(&fig_rid));
        if !cites {
            continue;
        }
        if let Some(p) = xref.ancestors().find(|a| a.has_tag_name("p")) {
            if seen.insert(p.id()) {
                out.push(plain_text(p));
            }
        }
    }
    out
}

fn article_meta<'a, 'i>(doc: &'a Document<'i>) -> Option<Node<'a, 'i>> {
    first(doc.root(), "article-meta")
}

fn pub_date(meta: Node<'_, '_>) -> String {
    let dates: Vec<Node> = meta.children().filter(|n| n.has_tag_name("pub-date")).collect();
    let preferred = dates
        .iter()
        .find(|d| {
            matches!(d.attribute("pub-type"), Some("epub"))
                || matches!(d.attribute("date-type"), Some("pub"))
        })
        .or(dates.first());
    let Some(d) = preferred else {
        return String::new();
    };
    let part = |name: &'static str| {
        d.children()
            .find(|n| n.has_tag_name(name))
            .and_then(|n| n.text())
            .and_then(|t| t.trim().parse::<u32>().ok())
    };
    match part("year") {
        Some(y) => format!("{y:04}-{:02}-{:02}", part("month").unwrap_or(1), part("day").unwrap_or(1)),
        None => String::new(),
    }
}

fn license_string(meta: Node<'_, '_>) -> String {
    let Some(lic) = first(meta, "license") else {
        return String::new();
    };
    if let Some(h) = href(lic).filter(|h| h.contains("creativecommons.org")) {
        return h.to_string();
    }
    if let Some(t) = lic.attribute("license-type").filter(|t| !t.trim().is_empty()) {
        return t.to_string();
    }
    plain_text(lic)
}

fn media_index(media_dir: &Path) -> Result<BTreeMap<String, String>, JatsError> {
    let files = if media_dir.is_dir() {
        list_files(media_dir).map_err(|source| JatsError::Media {
            path: media_dir.to_path_buf(),
            source,
        })?
    } else {
        Vec::new()
    };
    let mut index: BTreeMap<String, String> = BTreeMap::new();
    for rel in files {
        let rel = rel.to_string_lossy().replace('\\', "/");
        let Some(ext) = lowercase_extension(&rel) else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let key = media_key(&rel).to_string();
        let replace = match index.get(&key) {
            None => true,
            Some(existing) => ext == "jpg" && lowercase_extension(existing).as_deref() != Some("jpg"),
        };
        if replace {
            index.insert(key, rel);
        }
    }
    Ok(index)
}

fn load_image(media_dir: &Path, rel: &str, fig: &mut FigureRecord) -> Result<(), JatsError> {
    let path = media_dir.join(rel);
    let bytes = fs::read(&path).map_err(|source| JatsError::Media { path, source })?;
    fig.image_hash = sha256_hex(&bytes);
    if let Ok(size) = imagesize::blob_size(&bytes) {
        fig.width = u32::try_from(size.width).ok();
        fig.height = u32::try_from(size.height).ok();
    }
    Ok(())
}

/// Parses one article. Every `<graphic>` becomes a figure matched to its
/// caption and mentions; images on disk that no graphic references become
/// figures with an empty caption.
pub fn parse_article(nxml: &[u8], media_dir: &Path) -> Result<ParsedArticle, JatsError> {
    let doc = parse_xml(nxml)?;
    let mut warnings = Vec::new();
    let root = doc.root_element();
    let meta = article_meta(&doc);

    let text_of = |node: Option<Node>, name: &'static str| {
        node.and_then(|n| first(n, name)).map(plain_text).unwrap_or_default()
    };
    let article_id = |kind: &str| {
        meta.into_iter()
            .flat_map(|m| m.children())
            .filter(|n| n.has_tag_name("article-id"))
            .find(|n| n.attribute("pub-id-type") == Some(kind))
            .and_then(|n| n.text())
            .map(|t| t.trim().to_string())
    };
    let accession_id = article_id("pmc")
        .or_else(|| article_id("pmcid"))
        .map(|id| if id.starts_with("PMC") { id } else { format!("PMC{id}") })
        .unwrap_or_default();
    let pmid = article_id("pmid").and_then(|p| p.parse().ok());

    let abstract_text = meta
        .map(|m| {
            let abstracts: Vec<Node> = named(m, "abstract").collect();
            abstracts
                .iter()
                .find(|a| a.attribute("abstract-type").is_none())
                .or(abstracts.first())
                .map(|a| plain_text(*a))
                .unwrap_or_default()
        })
        .unwrap_or_default();
    let keywords = meta
        .map(|m| named(m, "kwd").map(plain_text).filter(|k| !k.is_empty()).collect())
        .unwrap_or_default();
    let category = meta.and_then(|m| {
        let groups: Vec<Node> = named(m, "subj-group").collect();
        groups
            .iter()
            .find(|g| g.attribute("subj-group-type") == Some("heading"))
            .or(groups.first())
            .and_then(|g| g.children().find(|n| n.has_tag_name("subject")))
            .map(plain_text)
    });
    let journal = first(root, "journal-meta")
        .and_then(|j| first(j, "journal-title"))
        .map(plain_text)
        .unwrap_or_default();
    let license_raw = meta.map(license_string).unwrap_or_default();

    let media = media_index(media_dir)?;
    let mut figures: Vec<FigureRecord> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for graphic in named(root, "graphic") {
        let Some(h) = href(graphic) else { continue };
        let image_id = media_key(h).to_string();
        if image_id.is_empty() {
            continue;
        }
        if !seen.insert(image_id.clone()) {
            warnings.push(Warning::DuplicateGraphic { image_id });
            continue;
        }
        let m = match_caption(&doc, &image_id);
        if m.matches > 1 {
            warnings.push(Warning::AmbiguousCaption {
                image_id: image_id.clone(),
                figs: m.matches,
            });
        }
        let mentions = m.fig_id.as_deref().map(|rid| extract_mentions(&doc, rid)).unwrap_or_default();
        let mut fig = FigureRecord {
            image_id: image_id.clone(),
            fig_id: m.fig_id,
            image_file: h.to_string(),
            caption: m.caption,
            mentions,
            image_hash: String::new(),
            width: None,
            height: None,
            missing: true,
        };
        match media.get(&image_id) {
            Some(rel) => {
                fig.image_file = rel.clone();
                fig.missing = false;
                load_image(media_dir, rel, &mut fig)?;
            }
            None => warnings.push(Warning::MissingMedia {
                image_id,
                href: h.to_string(),
            }),
        }
        figures.push(fig);
    }
    for (key, rel) in &media {
        if seen.contains(key) {
            continue;
        }
        let mut fig = FigureRecord {
            image_id: key.clone(),
            fig_id: None,
            image_file: rel.clone(),
            caption: String::new(),
            mentions: Vec::new(),
            image_hash: String::new(),
            width: None,
            height: None,
            missing: false,
        };
        load_image(media_dir, rel, &mut fig)?;
        figures.push(fig);
    }

    let doc_out = ArticleDoc {
        pmid,
        accession_id,
        nxml: String::new(),
        title: text_of(meta, "article-title"),
        abstract_text,
        keywords,
        category,
        full_text: first(root, "body").map(plain_text).unwrap_or_default(),
        license_group: classify_license(&license_raw),
        license_raw,
        figure_set: figures,
        date: meta.map(pub_date).unwrap_or_default(),
        journal,
        citation: String::new(),
        mesh_terms: Vec::new(),
        citing_pmids: Vec::new(),
        citing_count: 0,
    };
    Ok(ParsedArticle {
        doc: doc_out,
        warnings,
    })
}
