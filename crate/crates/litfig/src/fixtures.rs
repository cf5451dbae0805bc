//! Synthetic mirror content: JATS articles, tiny JPEGs, `.tar.gz` packages
//! and the file list that indexes them. Used by tests and `litfig demo`.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;

use litfig_core::vote::{ClusterAnnotation, ClusterId, PanelType};

use crate::entrez::CannedRecord;
use crate::transport::MockTransport;

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSpec {
    pub image_id: String,
    pub fig_id: String,
    /// `None` writes a `<fig>` without a `<caption>`.
    pub caption: Option<String>,
    /// Body paragraph that cross-references the figure.
    pub mention: Option<String>,
    /// `false` ships the image in the package without a `<graphic>` for it.
    pub in_xml: bool,
    pub width: u16,
    pub height: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticleSpec {
    pub accession_id: String,
    pub pmid: Option<u64>,
    pub license: String,
    pub title: String,
    pub abstract_text: String,
    pub keywords: Vec<String>,
    pub journal: String,
    pub date: String,
    pub citation: String,
    pub figures: Vec<FigureSpec>,
}

impl ArticleSpec {
    pub fn file_path(&self) -> String {
        format!("oa_package/{}/{}.tar.gz", &self.accession_id[self.accession_id.len() - 2..], self.accession_id)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A JPEG header carrying `width`x`height` plus a comment segment that makes
/// the bytes unique per `tag`. Enough for size probing and hashing; not a
/// decodable picture.
pub fn jpeg_bytes(width: u16, height: u16, tag: &str) -> Vec<u8> {
    let mut b = vec![0xFF, 0xD8];
    let comment = tag.as_bytes();
    let len = (comment.len() + 2) as u16;
    b.extend([0xFF, 0xFE]);
    b.extend(len.to_be_bytes());
    b.extend(comment);
    b.extend([0xFF, 0xC0, 0x00, 0x11, 0x08]);
    b.extend(height.to_be_bytes());
    b.extend(width.to_be_bytes());
    b.extend([0x03, 0x01, 0x22, 0x00, 0x02, 0x11, 0x01, 0x03, 0x11, 0x01]);
    b.extend([0xFF, 0xD9]);
    b
}

pub fn article_nxml(a: &ArticleSpec) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str("<!DOCTYPE article PUBLIC \"-//NLM//DTD JATS (Z39.96) Journal Archiving and Interchange DTD v1.2 20190208//EN\" \"JATS-archivearticle1.dtd\">\n");
    s.push_str("<article xmlns:xlink=\"http://www.w3.org/1999/xlink\" article-type=\"research-article\">\n<front>\n");
    let _ = writeln!(
        s,
        "<journal-meta><journal-title-group><journal-title>{}</journal-title></journal-title-group></journal-meta>",
        esc(&a.journal)
    );
    s.push_str("<article-meta>\n");
    if let Some(p) = a.pmid {
        let _ = writeln!(s, "<article-id pub-id-type=\"pmid\">{p}</article-id>");
    }
    let _ = writeln!(
        s,
        "<article-id pub-id-type=\"pmc\">{}</article-id>",
        a.accession_id.trim_start_matches("PMC")
    );
    s.push_str("<article-categories><subj-group subj-group-type=\"heading\"><subject>Research Article</subject></subj-group></article-categories>\n");
    let _ = writeln!(s, "<title-group><article-title>{}</article-title></title-group>", esc(&a.title));
    let mut date = a.date.split('-');
    let (y, m, d) = (date.next().unwrap_or(""), date.next().unwrap_or(""), date.next().unwrap_or(""));
    let _ = writeln!(
        s,
        "<pub-date pub-type=\"epub\"><day>{d}</day><month>{m}</month><year>{y}</year></pub-date>"
    );
    let _ = writeln!(
        s,
        "<permissions><license><license-p>{}</license-p></license></permissions>",
        esc(&a.license)
    );
    let _ = writeln!(s, "<abstract><p>{}</p></abstract>", esc(&a.abstract_text));
    s.push_str("<kwd-group>");
    for k in &a.keywords {
        let _ = write!(s, "<kwd>{}</kwd>", esc(k));
    }
    s.push_str("</kwd-group>\n</article-meta>\n</front>\n<body>\n<sec><title>Results</title>\n");
    for f in a.figures.iter().filter(|f| f.in_xml) {
        if let Some(m) = &f.mention {
            let _ = writeln!(
                s,
                "<p>{} (<xref ref-type=\"fig\" rid=\"{}\">Figure</xref>).</p>",
                esc(m),
                f.fig_id
            );
        }
    }
    for f in a.figures.iter().filter(|f| f.in_xml) {
        let _ = write!(s, "<fig id=\"{}\">", f.fig_id);
        if let Some(c) = &f.caption {
            let _ = write!(s, "<caption><p>{}</p></caption>", esc(c));
        }
        let _ = writeln!(s, "<graphic xlink:href=\"{}\"/></fig>", f.image_id);
    }
    s.push_str("</sec>\n</body>\n</article>\n");
    s
}

fn image_tag(a: &ArticleSpec, f: &FigureSpec) -> String {
    format!("{}/{}", a.accession_id, f.image_id)
}

pub fn image_bytes(a: &ArticleSpec, f: &FigureSpec) -> Vec<u8> {
    jpeg_bytes(f.width, f.height, &image_tag(a, f))
}

/// The article's `.tar.gz` package: `<acc>/<acc>.nxml`, one `.jpg` per
/// figure and a `.pdf` the default keep set drops.
pub fn package_bytes(a: &ArticleSpec) -> io::Result<Vec<u8>> {
    let mut tar = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
    let mut add = |name: String, bytes: &[u8]| -> io::Result<()> {
        let mut h = tar::Header::new_gnu();
        h.set_size(bytes.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_entry_type(tar::EntryType::Regular);
        tar.append_data(&mut h, name, bytes)
    };
    let acc = &a.accession_id;
    add(format!("{acc}/{acc}.nxml"), article_nxml(a).as_bytes())?;
    for f in &a.figures {
        add(format!("{acc}/{}.jpg", f.image_id), &image_bytes(a, f))?;
    }
    add(format!("{acc}/{acc}.pdf"), b"%PDF-1.4 stub")?;
    let mut gz = tar.into_inner()?;
    gz.flush()?;
    gz.finish()
}

pub fn file_list_csv(articles: &[ArticleSpec]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["File", "Article Citation", "Accession ID", "Last Updated (YYYY-MM-DD HH:MM:SS)", "PMID", "License"])
        .expect("in-memory csv");
    for a in articles {
        let pmid = a.pmid.map(|p| format!("PMID:{p}")).unwrap_or_default();
        let date = format!("{} 00:00:00", a.date);
        w.write_record([a.file_path().as_str(), &a.citation, &a.accession_id, &date, &pmid, &a.license])
            .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Writes packages under `dir/<file_path>` and the file list at
/// `dir/oa_file_list.csv`, returning the file list path.
pub fn write_mirror(dir: &Path, articles: &[ArticleSpec]) -> io::Result<PathBuf> {
    for a in articles {
        let p = dir.join(a.file_path());
        std::fs::create_dir_all(p.parent().expect("package path has a parent"))?;
        std::fs::write(&p, package_bytes(a)?)?;
    }
    let list = dir.join("oa_file_list.csv");
    std::fs::write(&list, file_list_csv(articles))?;
    Ok(list)
}

pub fn mock_transport(articles: &[ArticleSpec]) -> io::Result<MockTransport> {
    let t = MockTransport::new();
    for a in articles {
        t.insert(&a.file_path(), package_bytes(a)?);
    }
    Ok(t)
}

/// Canned metadata for every article with a PMID: two MeSH terms and the
/// other articles' PMIDs as citers.
pub fn canned_records(articles: &[ArticleSpec]) -> Vec<CannedRecord> {
    let pmids: Vec<u64> = articles.iter().filter_map(|a| a.pmid).collect();
    articles
        .iter()
        .filter_map(|a| a.pmid)
        .enumerate()
        .map(|(i, p)| CannedRecord {
            pmid: p,
            mesh_terms: vec![format!("Term {}", i % 2), format!("Topic {p}")],
            citing_pmids: pmids.iter().copied().filter(|&q| q != p).take(i + 1).collect(),
        })
        .collect()
}

fn fig(image_id: &str, fig_id: &str, caption: Option<&str>, mention: Option<&str>, w: u16, h: u16) -> FigureSpec {
    FigureSpec {
        image_id: image_id.into(),
        fig_id: fig_id.into(),
        caption: caption.map(str::to_string),
        mention: mention.map(str::to_string),
        in_xml: true,
        width: w,
        height: h,
    }
}

/// Three articles with seven figures between them and three license groups.
/// The last figure of the third article is on disk only.
pub fn demo_articles() -> Vec<ArticleSpec> {
    let base = |acc: &str, pmid: Option<u64>, license: &str, title: &str, figures| ArticleSpec {
        accession_id: acc.into(),
        pmid,
        license: license.into(),
        title: title.into(),
        abstract_text: format!("Abstract of {title}."),
        keywords: vec!["imaging".into(), acc.to_lowercase()],
        journal: "Journal of Synthetic Results".into(),
        date: "2021-03-04".into(),
        citation: format!("J Synth Res. 2021; {}", &acc[3..]),
        figures,
    };
    let mut third_only_on_disk = fig("pone.0003", "F3", None, None, 320, 200);
    third_only_on_disk.in_xml = false;
    vec![
        base(
            "PMC1001",
            Some(31001),
            "CC BY",
            "Fluorescence imaging of cultured cells",
            vec![
                fig("cells-1", "F1", Some("Confocal image of stained nuclei."), Some("Nuclei are shown"), 640, 480),
                fig("cells-2", "F2", Some("Western blot of lysates & controls."), Some("Blot results"), 800, 600),
                fig("cells-3", "F3", Some("Bar chart of <counts>."), None, 400, 300),
            ],
        ),
        base(
            "PMC1002",
            Some(31002),
            "CC BY-NC-SA",
            "Chest radiograph review",
            vec![
                fig("xray-a", "g001", Some("Frontal chest X-ray."), Some("The radiograph"), 1024, 1024),
                fig("xray-b", "g002", None, Some("Lateral view"), 1024, 900),
            ],
        ),
        base(
            "PMC1003",
            None,
            "custom hospital license",
            "Regional map of sampling sites",
            vec![fig("pone.0002", "F1", Some("Map of sites."), Some("Sites are mapped"), 500, 500), third_only_on_disk],
        ),
    ]
}

/// `n` single-figure articles with distinct captions and image bytes, for
/// scale tests.
pub fn bulk_articles(n: usize) -> Vec<ArticleSpec> {
    const LICENSES: [&str; 3] = ["CC BY", "CC BY-NC", "other"];
    (0..n)
        .map(|i| ArticleSpec {
            accession_id: format!("PMC{:07}", 2_000_000 + i),
            pmid: Some(40_000_000 + i as u64),
            license: LICENSES[i % 3].into(),
            title: format!("Article {i}"),
            abstract_text: format!("Abstract {i}."),
            keywords: vec![format!("k{}", i % 7)],
            journal: "Bulk Journal".into(),
            date: "2020-01-01".into(),
            citation: format!("Bulk J. 2020; {i}"),
            figures: vec![fig("fig1", "F1", Some(&format!("Caption number {i}.")), Some("See"), 64, 48)],
        })
        .collect()
}

/// Three annotators per cluster. The first two agree; the third names a
/// different concept, so every cluster resolves with a clear majority.
pub fn scripted_annotations(k: usize) -> Vec<ClusterAnnotation> {
    const PLAN: [(&str, &str, PanelType); 4] = [
        ("Microscopy", "confocal microscopy", PanelType::Single),
        ("Clinical Imaging", "x-ray radiography", PanelType::Single),
        ("Maps", "map", PanelType::Single),
        ("Plots and Charts", "bar plot", PanelType::MultiBioPlots),
    ];
    let mut out = Vec::new();
    for c in 0..k {
        let (g, l, panel) = PLAN[c % PLAN.len()];
        let (og, ol, _) = PLAN[(c + 1) % PLAN.len()];
        for (i, (g, l)) in [(g, l), (g, l), (og, ol)].into_iter().enumerate() {
            out.push(ClusterAnnotation {
                annotator_id: format!("annotator-{}", i + 1),
                cluster_id: c as ClusterId,
                panel_type: panel,
                global_labels: vec![g.to_string()],
                local_labels: vec![l.to_string()],
                submitted_at: "2024-01-01T00:00:00Z".into(),
            });
        }
    }
    out
}
